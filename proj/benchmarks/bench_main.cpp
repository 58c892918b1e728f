#include <benchmark/benchmark.h>

#include "bitlm/codec.hpp"
#include "bitlm/model.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/training.hpp"

namespace {

using namespace bitlm;

ModelConfig bench_config(int m, std::int64_t vocab = 259) {
  ModelConfig c;
  c.codec = CodecConfig::make(vocab, m, static_cast<TokenId>(vocab - 3),
                              static_cast<TokenId>(vocab - 2));
  c.backbone.hidden_size = 64;
  c.backbone.num_layers = 2;
  c.backbone.num_heads = 4;
  c.backbone.max_seq_len = 1024;
  c.head.head_hidden = 64;
  c.head.head_layers = 2;
  c.head.head_heads = 2;
  c.head.time_embed_dim = 64;
  c.reconcile();
  return c;
}

Tensor<float> codes_for(std::size_t rows, const CodecConfig& codec) {
  std::vector<TokenId> ids(rows);
  for (std::size_t i = 0; i < rows; ++i) ids[i] = static_cast<TokenId>(i % 200);
  return encode_tokens<float>(ids, codec);
}

void BM_CodecRoundTrip(benchmark::State& state) {
  const auto cfg = CodecConfig::make(151936, 4, 0, 1);
  TokenId id = 0;
  for (auto _ : state) {
    const BitCode c = encode_token(id, cfg);
    benchmark::DoNotOptimize(decode_code(c, cfg));
    id = (id + 7919) % 151936;
  }
}
BENCHMARK(BM_CodecRoundTrip);

// One incremental block after a prefix of `range(1)` positions.
void BM_ForwardBlock(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const auto prefix = static_cast<std::size_t>(state.range(1));
  const auto model = Model<float>::create(bench_config(m), 1);
  const auto prefill = model.backbone.forward_full(codes_for(prefix, model.codec));
  const auto block = codes_for(static_cast<std::size_t>(m), model.codec);
  for (auto _ : state) {
    KVCache<float> cache = prefill.cache;
    benchmark::DoNotOptimize(model.backbone.forward_block(block, cache));
  }
  state.SetItemsProcessed(state.iterations() * m);
}
BENCHMARK(BM_ForwardBlock)->Args({1, 64})->Args({4, 64})->Args({4, 256})->Args({8, 256});

void BM_ForwardFull(benchmark::State& state) {
  const auto L = static_cast<std::size_t>(state.range(0));
  const auto model = Model<float>::create(bench_config(4), 1);
  const auto codes = codes_for(L, model.codec);
  for (auto _ : state) benchmark::DoNotOptimize(model.backbone.forward_full(codes));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L));
}
BENCHMARK(BM_ForwardFull)->Arg(64)->Arg(256);

void BM_GuidedDenoiseStep(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const double w = state.range(1) != 0 ? 9.0 : 1.0;
  const auto model = Model<float>::create(bench_config(m), 1);
  const auto x = codes_for(static_cast<std::size_t>(m), model.codec);
  const Tensor<float> cond(static_cast<std::size_t>(m), model.backbone.config().d());
  for (auto _ : state) benchmark::DoNotOptimize(denoise_step(model.head, x, 0.5, 0.4, cond, w));
}
BENCHMARK(BM_GuidedDenoiseStep)->Args({1, 0})->Args({4, 0})->Args({4, 1});

// Tokens per second for T = 64 at K = 15 and guidance 9.
void BM_Generate(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const auto model = Model<float>::create(bench_config(m), 1);
  const auto schedule = make_schedule(15, ScheduleKind::kUniform, 9.0);
  GenerateOptions opt;
  opt.max_tokens = 64;
  opt.stop_at_eos = false;
  for (auto _ : state) benchmark::DoNotOptimize(generate<float>(model, {}, schedule, opt));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Generate)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto cfg = bench_config(4);
  std::vector<std::vector<TokenId>> samples(16, std::vector<TokenId>(20));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = 0; j < 20; ++j) samples[i][j] = static_cast<TokenId>((i * 31 + j) % 256);
  }
  const auto packs = pack_corpus(samples, cfg.codec, 128).packs;
  TrainConfig tc;
  Trainer<float> trainer(Model<float>::create(cfg, 1), tc);
  std::int64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(batch_for_step(packs, 4, 0, step++)));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
