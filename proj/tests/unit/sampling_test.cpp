#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "bitlm/errors.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/verify.hpp"
#include "fixtures.hpp"

namespace {

using namespace bitlm;

template <typename T>
void set_output_bias(Model<T>& model, TokenId id) {
  const BitCode code = encode_token(id, model.codec);
  for (Parameter<T>* p : model.parameters()) {
    if (p->name != "head.out.b") continue;
    for (std::size_t k = 0; k < code.bits.size(); ++k) p->value(0, k) = code.bits[k];
  }
}

TEST(Schedule, UniformAndCosineGrids) {
  const auto u = make_schedule(4);
  EXPECT_EQ(u.grid, (std::vector<double>{0, 0.25, 0.5, 0.75, 1}));
  EXPECT_EQ(u.steps(), 4u);
  const auto c = make_schedule(5, ScheduleKind::kCosine, 2.0);
  ASSERT_EQ(c.grid.size(), 6u);
  for (std::size_t k = 0; k <= 5; ++k) {
    EXPECT_NEAR(c.grid[k], 1 - std::cos(std::numbers::pi * k / 10.0), 1e-15);
  }
  EXPECT_EQ(c.grid.front(), 0.0);
  EXPECT_EQ(c.grid.back(), 1.0);
  EXPECT_EQ(c.guidance_scale, 2.0);
  EXPECT_THROW(make_schedule(0), DomainError);
  EXPECT_EQ(parse_schedule_kind("cosine"), ScheduleKind::kCosine);
  EXPECT_THROW(parse_schedule_kind("linear"), ConfigError);
}

TEST(Guidance, AffineCombination) {
  const auto u = Tensor<double>::from_rows({{1, -2}});
  const auto c = Tensor<double>::from_rows({{3, 0.5}});
  const auto g = guide(u, c, 9.0);
  EXPECT_DOUBLE_EQ(g(0, 0), 1 + 9 * 2);
  EXPECT_DOUBLE_EQ(g(0, 1), -2 + 9 * 2.5);
  EXPECT_EQ(guide(u, c, 1.0), c);
  EXPECT_EQ(guide(u, c, 0.0), u);
}

TEST(Euler, InterpolatesTowardPrediction) {
  const auto a = Tensor<double>::from_rows({{2, -4}});
  const auto x0 = Tensor<double>::from_rows({{1, 1}});
  const auto s = euler_update(a, x0, 0.8, 0.6);
  EXPECT_DOUBLE_EQ(s(0, 0), 0.75 * 2 + 0.25 * 1);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.75 * -4 + 0.25 * 1);
  EXPECT_EQ(euler_update(a, x0, 0.5, 0.0), x0);
  EXPECT_THROW(euler_update(a, x0, 0.5, 0.5), DomainError);
  EXPECT_THROW(euler_update(a, x0, 0.5, -0.1), DomainError);
}

TEST(GuidedPrediction, SingleBranchAtUnitScale) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  Model<double> model(cfg);
  randomize_parameters(model, 3, 0.5);
  const auto x = fixture::gaussian<double>(2, cfg.codec.bits(), 1);
  const auto c = fixture::gaussian<double>(2, cfg.backbone.d(), 2);
  EXPECT_EQ(guided_prediction(model.head, x, 0.4, c, 1.0), model.head.denoise({x, 0.4}, c));

  const auto cond = model.head.denoise({x, 0.4}, c);
  const auto uncond = model.head.denoise({x, 0.4}, model.head.null_condition().value);
  const auto want = guide(uncond, cond, 3.5);
  EXPECT_LT(max_abs_diff(guided_prediction(model.head, x, 0.4, c, 3.5), want), 1e-12);
}

TEST(GenerateBlock, OneStepOfUntrainedHeadGivesAllOnes) {
  // V = 6 leaves pattern 111 unassigned, so every row falls back to eos.
  const auto cfg = fixture::tiny(3, 6, 8, 1);
  const auto model = Model<double>::create(cfg, 1);
  Rng rng(4);
  const auto cond = fixture::gaussian<double>(3, cfg.backbone.d(), 5);
  const auto block = generate_block(model.head, model.codec, cond, make_schedule(1), rng);
  for (std::size_t i = 0; i < block.codes.size(); ++i) EXPECT_EQ(block.codes[i], 1.0);
  EXPECT_EQ(block.ids, (std::vector<TokenId>{5, 5, 5}));
  EXPECT_EQ(block.fallback_count, 3u);
}

TEST(GenerateBlock, OutputIsOnTheHypercube) {
  const auto cfg = fixture::tiny(4, 16, 8, 1);
  Model<double> model(cfg);
  randomize_parameters(model, 8, 0.5);
  Rng rng(1);
  const auto cond = fixture::gaussian<double>(4, cfg.backbone.d(), 2);
  const auto block = generate_block(model.head, model.codec, cond, make_schedule(7, ScheduleKind::kUniform, 3.0), rng);
  for (std::size_t i = 0; i < block.codes.size(); ++i) {
    EXPECT_TRUE(block.codes[i] == 1.0 || block.codes[i] == -1.0);
  }
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(block.ids[r], decode_bits<double>(block.codes.row(r), cfg.codec).id);
  }
}

TEST(Generate, ZeroTokensDoesNothing) {
  const auto cfg = fixture::tiny(2);
  const auto model = Model<double>::create(cfg, 1);
  GenerateOptions opt;
  opt.max_tokens = 0;
  const auto r = generate<double>(model, {}, make_schedule(3), opt);
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_EQ(r.stats.backbone_calls, 0u);
  EXPECT_EQ(r.stats.head_calls, 0u);
}

TEST(Generate, CallCountsFollowBlockCount) {
  for (int m : {1, 2, 4, 8}) {
    for (std::size_t T : {13u, 16u}) {
      const auto cfg = fixture::tiny(m, 8, 8, 1);
      Model<float> model(cfg);
      randomize_parameters(model, 2, 0.5);
      GenerateOptions opt;
      opt.max_tokens = T;
      opt.stop_at_eos = false;
      const std::size_t K = 3;
      const auto r = generate<float>(model, {}, make_schedule(K, ScheduleKind::kUniform, 2.0), opt);
      const std::size_t blocks = (T + m - 1) / m;
      EXPECT_EQ(r.tokens.size(), T);
      EXPECT_EQ(r.stats.backbone_calls, blocks) << "m=" << m;
      EXPECT_EQ(r.stats.head_calls, K * blocks) << "m=" << m;
      EXPECT_EQ(r.stats.blocks, blocks);
    }
  }
}

TEST(Generate, EosBlockIsCommittedBeforeStopping) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  auto model = Model<double>::create(cfg, 1);
  set_output_bias(model, cfg.codec.eos_id);
  GenerateOptions opt;
  opt.max_tokens = 10;
  const std::vector<TokenId> prompt = {1, 2, 3};
  const auto r = generate<double>(model, prompt, make_schedule(4), opt);
  EXPECT_EQ(r.tokens, (std::vector<TokenId>{cfg.codec.eos_id}));
  EXPECT_TRUE(r.eos_seen);
  EXPECT_EQ(r.stats.backbone_calls, 1u);

  GenerationSession<double> session(model, make_schedule(4), 0);
  session.prefill(prompt);
  EXPECT_EQ(session.cache().cached_len, 6u);
  session.step();
  EXPECT_EQ(session.cache().cached_len, 8u);
}

TEST(Generate, ForcedTokenWithoutEosRunsToLimit) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  auto model = Model<double>::create(cfg, 1);
  set_output_bias(model, 3);
  GenerateOptions opt;
  opt.max_tokens = 5;
  const auto r = generate<double>(model, {}, make_schedule(2), opt);
  EXPECT_EQ(r.tokens, std::vector<TokenId>(5, 3));
  EXPECT_FALSE(r.eos_seen);
  EXPECT_EQ(r.stats.backbone_calls, 3u);
}

// The condition carried between blocks must equal what a full pass over
// prompt plus realized blocks produces.
TEST(Generate, IncrementalStateMatchesTeacherForcing) {
  const auto cfg = fixture::tiny(2, 8, 8, 2);
  Model<double> model(cfg);
  randomize_parameters(model, 12, 0.5);
  const std::vector<TokenId> prompt = {1, 2, 3};
  GenerationSession<double> session(model, make_schedule(3, ScheduleKind::kUniform, 2.0), 7);
  session.prefill(prompt);
  std::vector<TokenId> ids = encode_prompt(prompt, cfg.codec).ids;
  for (int n = 0; n < 4; ++n) {
    const auto block = session.step();
    ids.insert(ids.end(), block.ids.begin(), block.ids.end());
    const auto full = model.backbone.forward_full(encode_tokens<double>(ids, cfg.codec)).contexts;
    EXPECT_LT(max_abs_diff(session.condition(), full.slice_rows(ids.size() - 2, 2)), 1e-10);
  }
}

TEST(Generate, SeedDeterminesOutput) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  Model<float> model(cfg);
  randomize_parameters(model, 2, 0.5);
  GenerateOptions opt;
  opt.max_tokens = 12;
  opt.stop_at_eos = false;
  opt.seed = 99;
  const auto s = make_schedule(4, ScheduleKind::kCosine, 3.0);
  EXPECT_EQ(generate<float>(model, {}, s, opt).tokens, generate<float>(model, {}, s, opt).tokens);
}

TEST(Generate, PromptPastContextLimitThrows) {
  auto cfg = fixture::tiny(2, 8, 8, 1);
  cfg.backbone.max_seq_len = 6;
  const auto model = Model<double>::create(cfg, 1);
  const std::vector<TokenId> prompt = {1, 2, 3, 4, 5};
  EXPECT_THROW(generate<double>(model, prompt, make_schedule(2), GenerateOptions{}), LengthError);
}

}  // namespace
