#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "bitlm/diff_head.hpp"
#include "bitlm/errors.hpp"
#include "bitlm/model.hpp"
#include "bitlm/verify.hpp"
#include "fixtures.hpp"

namespace {

using namespace bitlm;

TEST(ForwardNoise, InterpolatesBetweenCleanAndNoise) {
  const auto clean = Tensor<double>::from_rows({{1, -1}, {-1, 1}});
  const auto noise = Tensor<double>::from_rows({{0.5, 2.0}, {-3.0, 0.25}});
  EXPECT_EQ(forward_noise(clean, 0.0, noise).values, clean);
  EXPECT_EQ(forward_noise(clean, 1.0, noise).values, noise);
  const auto mid = forward_noise(clean, 0.25, noise);
  EXPECT_DOUBLE_EQ(mid.values(0, 1), 0.75 * -1 + 0.25 * 2.0);
  EXPECT_DOUBLE_EQ(mid.t, 0.25);
}

TEST(ForwardNoise, RejectsBadInputs) {
  const auto clean = Tensor<double>::from_rows({{1, -1}});
  const auto noise = Tensor<double>::from_rows({{0, 0}});
  EXPECT_THROW(forward_noise(clean, -0.01, noise), DomainError);
  EXPECT_THROW(forward_noise(clean, 1.01, noise), DomainError);
  EXPECT_THROW(forward_noise(clean, std::nan(""), noise), DomainError);
  EXPECT_THROW(forward_noise(clean, 0.5, Tensor<double>(2, 2)), DimensionError);
}

TEST(DiffusionLoss, SumOverBitsMeanOverValidRows) {
  const auto pred = Tensor<double>::from_rows({{0.5, -1}, {1, 1}, {9, 9}});
  const auto clean = Tensor<double>::from_rows({{1, -1}, {-1, 1}, {1, 1}});
  const std::vector<std::uint8_t> valid = {1, 1, 0};
  // rows: 0.25 + 0, 4 + 0, ignored
  EXPECT_DOUBLE_EQ(diffusion_loss(pred, clean, valid), (0.25 + 4.0) / 2);
  const std::vector<std::uint8_t> none = {0, 0, 0};
  EXPECT_EQ(diffusion_loss(pred, clean, none), 0.0);
  const std::vector<std::uint8_t> wrong = {1, 1};
  EXPECT_THROW(diffusion_loss(pred, clean, wrong), DimensionError);
}

TEST(Sinusoid, MatchesClosedForm) {
  const std::size_t dim = 6;
  for (double t : {0.0, 0.3, 1.0}) {
    const auto f = sinusoidal_features(t, dim);
    for (std::size_t i = 0; i < 3; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / 3.0);
      EXPECT_NEAR(f(0, i), std::sin(1000 * t * freq), 1e-12);
      EXPECT_NEAR(f(0, 3 + i), std::cos(1000 * t * freq), 1e-12);
    }
  }
}

TEST(DiffusionHead, UntrainedHeadPredictsZeroAndLossIsB) {
  for (int vocab : {8, 16, 259}) {
    const auto cfg = fixture::tiny(4, vocab, 8, 2);
    const auto model = Model<double>::create(cfg, 1);
    const auto clean = fixture::random_codes<double>(4, cfg.codec, 2);
    const auto noise = fixture::gaussian<double>(4, cfg.codec.bits(), 3);
    const auto cond = fixture::gaussian<double>(4, cfg.backbone.d(), 4);
    const auto pred = model.head.denoise(forward_noise(clean, 0.6, noise), cond);
    for (std::size_t i = 0; i < pred.size(); ++i) ASSERT_EQ(pred[i], 0.0);
    const std::vector<std::uint8_t> valid(4, 1);
    EXPECT_DOUBLE_EQ(diffusion_loss(pred, clean, valid), static_cast<double>(cfg.codec.bits()));
  }
}

TEST(DiffusionHead, NullConditionIsOneBlock) {
  const auto cfg = fixture::tiny(3, 8, 8, 1);
  const auto model = Model<double>::create(cfg, 1);
  EXPECT_EQ(model.head.null_condition().value.rows(), 3u);
  EXPECT_EQ(model.head.null_condition().value.cols(), cfg.backbone.d());
}

class HeadProbe : public ::testing::TestWithParam<bool> {};

// d(prediction row i) / d(noisy row j) for i != j is nonzero exactly when
// positions are mixed.
TEST_P(HeadProbe, CrossPositionJacobian) {
  auto cfg = fixture::tiny(3, 8, 8, 2);
  cfg.head.mix_positions = GetParam();
  Model<double> model(cfg);
  randomize_parameters(model, 5, 0.5);
  auto noisy = fixture::gaussian<double>(3, cfg.codec.bits(), 6);
  const auto cond = fixture::gaussian<double>(3, cfg.backbone.d(), 7);
  const std::vector<double> t = {0.5};
  const auto base = model.head.denoise(noisy, t, cond);
  noisy(2, 1) += 1e-4;
  const auto moved = model.head.denoise(noisy, t, cond);
  double cross = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < base.cols(); ++c) cross = std::max(cross, std::abs(moved(r, c) - base(r, c)));
  }
  if (GetParam()) {
    EXPECT_GT(cross, 1e-9);
  } else {
    EXPECT_EQ(cross, 0.0);
  }
  double own = 0;
  for (std::size_t c = 0; c < base.cols(); ++c) own = std::max(own, std::abs(moved(2, c) - base(2, c)));
  EXPECT_GT(own, 1e-9);
}

INSTANTIATE_TEST_SUITE_P(MixPositions, HeadProbe, ::testing::Bool());

TEST(DiffusionHead, StackedBlocksAreIndependent) {
  const auto cfg = fixture::tiny(2, 8, 8, 2);
  Model<double> model(cfg);
  randomize_parameters(model, 9, 0.5);
  const auto a = fixture::gaussian<double>(2, cfg.codec.bits(), 1);
  const auto b = fixture::gaussian<double>(2, cfg.codec.bits(), 2);
  const auto ca = fixture::gaussian<double>(2, cfg.backbone.d(), 3);
  const auto cb = fixture::gaussian<double>(2, cfg.backbone.d(), 4);
  const std::vector<Tensor<double>> xs = {a, b}, cs = {ca, cb};
  const std::vector<double> ts = {0.2, 0.9};
  const auto stacked = model.head.denoise(concat_rows<double>(xs), ts, concat_rows<double>(cs));
  const auto one = model.head.denoise({a, 0.2}, ca);
  const auto two = model.head.denoise({b, 0.9}, cb);
  EXPECT_LT(max_abs_diff(stacked.slice_rows(0, 2), one), 1e-12);
  EXPECT_LT(max_abs_diff(stacked.slice_rows(2, 2), two), 1e-12);
}

TEST(DiffusionHead, DependsOnTimeAndCondition) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  Model<double> model(cfg);
  randomize_parameters(model, 10, 0.5);
  const auto x = fixture::gaussian<double>(2, cfg.codec.bits(), 1);
  const auto c = fixture::gaussian<double>(2, cfg.backbone.d(), 2);
  const auto base = model.head.denoise({x, 0.3}, c);
  EXPECT_GT(max_abs_diff(base, model.head.denoise({x, 0.7}, c)), 1e-6);
  EXPECT_GT(max_abs_diff(base, model.head.denoise({x, 0.3}, fixture::gaussian<double>(2, cfg.backbone.d(), 5))), 1e-6);
}

TEST(DiffusionHead, ShapeErrors) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  const auto model = Model<double>::create(cfg, 1);
  const auto c = fixture::gaussian<double>(2, cfg.backbone.d(), 2);
  EXPECT_THROW(model.head.denoise({Tensor<double>(3, cfg.codec.bits()), 0.5}, c), DimensionError);
  EXPECT_THROW(model.head.denoise({Tensor<double>(2, cfg.codec.bits() + 1), 0.5}, c), DimensionError);
}

}  // namespace
