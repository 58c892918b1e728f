#include "bitlm/training.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "bitlm/ops.hpp"

namespace bitlm {

PackingResult pack_corpus(std::span<const std::vector<TokenId>> samples,
                          const CodecConfig& codec, std::size_t pack_length) {
  const std::size_t m = codec.m();
  if (pack_length == 0 || pack_length % m != 0) {
    throw AlignmentError("pack_length must be a positive multiple of the block size");
  }
  PackingResult result;
  Pack current;

  auto flush = [&]() {
    if (current.ids.empty()) return;
    const auto filler = static_cast<std::int32_t>(current.doc_starts.size());
    while (current.ids.size() < pack_length) {
      current.ids.push_back(codec.eos_id);
      current.valid.push_back(0);
      current.segments.push_back(filler);
    }
    result.packs.push_back(std::move(current));
    current = Pack{};
  };

  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].empty()) {
      result.skipped.push_back({i, 0, "empty sample"});
      continue;
    }
    const BlockSequence seq = encode_sequence(samples[i], codec);
    if (seq.length() > pack_length) {
      result.skipped.push_back({i, seq.length(), "encoded sample longer than pack_length"});
      continue;
    }
    if (current.ids.size() + seq.length() > pack_length) flush();
    const auto segment = static_cast<std::int32_t>(current.doc_starts.size());
    current.doc_starts.push_back(current.ids.size());
    current.ids.insert(current.ids.end(), seq.ids.begin(), seq.ids.end());
    current.valid.insert(current.valid.end(), seq.valid.begin(), seq.valid.end());
    current.segments.insert(current.segments.end(), seq.length(), segment);
  }
  flush();
  return result;
}

PackedBatch batch_for_step(std::span<const Pack> packs, std::size_t batch_size,
                           std::uint64_t seed, std::int64_t step) {
  PackedBatch batch;
  if (packs.empty() || batch_size == 0) return batch;
  const std::size_t n = packs.size();
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto global = static_cast<std::uint64_t>(step) * batch_size + i;
    const std::uint64_t epoch = global / n;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(seed ^ ((epoch + 1) * 0x9E3779B97F4A7C15ULL));
      for (std::size_t k = n; k > 1; --k) {
        std::swap(order[k - 1], order[rng.next_u64() % k]);
      }
      cached_epoch = epoch;
    }
    batch.sequences.push_back(packs[order[global % n]]);
  }
  return batch;
}

template <typename T>
Tensor<T> shifted_condition(const Tensor<T>& contexts, std::size_t n, std::size_t block_size) {
  const std::size_t blocks = block_size == 0 ? 0 : contexts.rows() / block_size;
  if (n < 1 || n > blocks) {
    throw DomainError("shifted_condition: block " + std::to_string(n) + " outside [1, " +
                      std::to_string(blocks) + "]");
  }
  const std::size_t source = n == 1 ? 1 : n - 1;
  return contexts.slice_rows((source - 1) * block_size, block_size);
}

std::vector<BlockTarget> block_targets(const PackedBatch& batch, std::size_t block_size) {
  std::vector<BlockTarget> targets;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    const Pack& p = batch.sequences[s];
    const std::size_t blocks = p.ids.size() / block_size;
    for (std::size_t b = 1; b < blocks; ++b) {
      const std::size_t start = b * block_size;
      // the previous block must belong to the same document
      if (p.segments[start] != p.segments[start - 1]) continue;
      std::size_t valid = 0;
      for (std::size_t i = start; i < start + block_size; ++i) valid += p.valid[i] ? 1 : 0;
      if (valid == 0) continue;
      targets.push_back({s, b, valid});
    }
  }
  return targets;
}

template <typename T>
Trainer<T>::Trainer(Model<T> model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)), rng_(cfg_.seed ^ 0x5BD1E995ULL) {}

template <typename T>
double Trainer<T>::lr_at(std::int64_t step) const {
  const auto warmup =
      static_cast<std::int64_t>(std::ceil(cfg_.warmup_frac * static_cast<double>(cfg_.total_steps)));
  if (warmup <= 0) return cfg_.lr;
  return cfg_.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

template <typename T>
std::vector<BlockDraw<T>> Trainer<T>::draw(const std::vector<BlockTarget>& targets) {
  return draw(targets, rng_);
}

template <typename T>
std::vector<BlockDraw<T>> Trainer<T>::draw(const std::vector<BlockTarget>& targets,
                                           Rng& rng) const {
  const std::size_t m = model_.codec.m(), B = model_.codec.bits();
  std::vector<BlockDraw<T>> draws;
  draws.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    BlockDraw<T> d;
    d.drop_condition = rng.uniform() < cfg_.cond_dropout_p;
    d.t = static_cast<T>(rng.uniform());
    d.noise = Tensor<T>(m, B);
    for (auto& x : d.noise.data()) x = static_cast<T>(rng.normal());
    draws.push_back(std::move(d));
  }
  return draws;
}

template <typename T>
T Trainer<T>::compute_loss(const PackedBatch& batch, const std::vector<BlockTarget>& targets,
                           const std::vector<BlockDraw<T>>& draws,
                           bool accumulate_grads) const {
  if (draws.size() != targets.size()) throw DimensionError("one draw per target required");
  if (targets.empty()) return T{0};
  const std::size_t m = model_.codec.m();
  Graph<T> g(accumulate_grads ? Graph<T>::Mode::kRecord : Graph<T>::Mode::kInference);

  std::vector<Value<T>> contexts(batch.sequences.size());
  std::vector<Tensor<T>> codes(batch.sequences.size());
  std::vector<bool> needed(batch.sequences.size(), false);
  for (const auto& tgt : targets) needed[tgt.sequence] = true;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    if (!needed[s]) continue;
    const Pack& p = batch.sequences[s];
    codes[s] = encode_tokens<T>(p.ids, model_.codec);
    contexts[s] = model_.backbone.forward_packed(g, g.constant(codes[s]), p.segments,
                                                 cfg_.isolate_documents);
  }

  std::vector<Value<T>> conds;
  std::vector<Tensor<T>> noisy, clean;
  std::vector<T> times;
  std::vector<T> weights;
  conds.reserve(targets.size());
  const T per_block = T{1} / static_cast<T>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const BlockTarget& tgt = targets[i];
    const BlockDraw<T>& d = draws[i];
    const Pack& p = batch.sequences[tgt.sequence];
    conds.push_back(d.drop_condition
                        ? g.param(model_.head.null_condition())
                        : ops::slice_rows(contexts[tgt.sequence], (tgt.block - 1) * m, m));
    clean.push_back(codes[tgt.sequence].slice_rows(tgt.block * m, m));
    noisy.push_back(forward_noise(clean.back(), d.t, d.noise).values);
    times.push_back(d.t);
    for (std::size_t r = 0; r < m; ++r) {
      const bool valid = p.valid[tgt.block * m + r] != 0;
      weights.push_back(valid ? per_block / static_cast<T>(tgt.valid_positions) : T{0});
    }
  }

  Value<T> pred = model_.head.forward(g, g.constant(concat_rows<T>(noisy)), times,
                                      ops::concat_rows(conds));
  Value<T> loss = ops::weighted_squared_error<T>(pred, concat_rows<T>(clean), weights);
  if (accumulate_grads) {
    model_.for_each_parameter([](const Parameter<T>& p) { p.zero_grad(); });
    g.backward(loss);
  }
  return loss.value()[0];
}

template <typename T>
T Trainer<T>::evaluate(const PackedBatch& batch, std::uint64_t seed) const {
  const std::vector<BlockTarget> targets = block_targets(batch, model_.codec.m());
  Rng rng(seed);
  return compute_loss(batch, targets, draw(targets, rng), false);
}

template <typename T>
T Trainer<T>::train_step(const PackedBatch& batch) {
  const std::vector<BlockTarget> targets = block_targets(batch, model_.codec.m());
  const std::vector<BlockDraw<T>> draws = draw(targets);
  model_.for_each_parameter([](const Parameter<T>& p) { p.zero_grad(); });
  const T loss = compute_loss(batch, targets, draws, true);
  if (!std::isfinite(static_cast<double>(loss))) {
    nlohmann::json diag = {{"step", step_},
                           {"loss", std::isnan(loss) ? "nan" : "inf"},
                           {"lr", lr_at(step_)},
                           {"targets", targets.size()},
                           {"sequences", batch.sequences.size()}};
    nlohmann::json grads = nlohmann::json::object();
    model_.for_each_parameter([&](const Parameter<T>& p) {
      double sq = 0;
      for (T x : p.grad.data()) sq += static_cast<double>(x) * static_cast<double>(x);
      grads[p.name] = std::isfinite(sq) ? nlohmann::json(std::sqrt(sq)) : nlohmann::json("non-finite");
    });
    diag["grad_norms"] = grads;
    throw NonFiniteLossError("non-finite loss at step " + std::to_string(step_), diag.dump(2));
  }
  std::vector<Parameter<T>*> params = model_.parameters();
  adamw_step<T>(std::span<Parameter<T>* const>(params), opt_, cfg_.adamw(), lr_at(step_));
  ++step_;
  return loss;
}

template Tensor<float> shifted_condition<float>(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> shifted_condition<double>(const Tensor<double>&, std::size_t,
                                                  std::size_t);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace bitlm
