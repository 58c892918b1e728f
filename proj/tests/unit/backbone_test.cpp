#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "bitlm/backbone.hpp"
#include "bitlm/errors.hpp"
#include "bitlm/ops.hpp"
#include "bitlm/verify.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using namespace bitlm;

double max_diff(const Tensor<double>& a, const oracle::Matrix& b) {
  double worst = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(a(r, c) - b[r][c]));
  }
  return worst;
}

Model<double> random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<double> m(cfg);
  randomize_parameters(m, seed, 0.4);
  return m;
}

TEST(BlockIndex, OneBasedFloor) {
  EXPECT_EQ(block_index(1, 4), 1);
  EXPECT_EQ(block_index(4, 4), 1);
  EXPECT_EQ(block_index(5, 4), 2);
  EXPECT_EQ(block_index(9, 4), 3);
  EXPECT_EQ(block_index(7, 1), 7);
  EXPECT_THROW(block_index(0, 4), DomainError);
  EXPECT_THROW(block_index(3, 0), DomainError);
}

TEST(Mask, MatchesBruteForceVisibility) {
  for (std::size_t m = 1; m <= 5; ++m) {
    for (std::size_t L : {m, 2 * m, 3 * m, std::size_t{12}}) {
      const auto mask = build_mask<double>(L, m);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          const double want = oracle::block_visible(i, j, m) ? 0.0 : ops::kMaskedOut;
          ASSERT_EQ(mask(i, j), want) << "m=" << m << " i=" << i << " j=" << j;
        }
      }
    }
  }
}

TEST(Mask, BlockSizeOneIsCausal) {
  const auto mask = build_mask<double>(6, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(mask(i, j) == 0.0, j <= i);
  }
}

TEST(Mask, DocumentsDoNotSeeEachOther) {
  const std::vector<std::int32_t> seg = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2};
  const auto mask = build_document_mask<double>(2, seg);
  for (std::size_t i = 0; i < seg.size(); ++i) {
    for (std::size_t j = 0; j < seg.size(); ++j) {
      const bool vis = seg[i] == seg[j] && oracle::block_visible(i, j, 2);
      EXPECT_EQ(mask(i, j) == 0.0, vis) << i << "," << j;
    }
  }
}

TEST(Backbone, BlockSizeOneMatchesCausalTransformer) {
  for (int layers : {1, 2}) {
    const auto cfg = fixture::tiny(1, 16, 8, layers);
    const auto model = random_model(cfg, 11 + layers);
    const auto codes = fixture::random_codes<double>(9, cfg.codec, 3);
    const auto got = model.backbone.forward_full(codes).contexts;
    const auto want = oracle::causal_transformer(model.backbone, oracle::to_matrix(codes));
    EXPECT_LT(max_diff(got, want), 1e-10) << layers << " layers";
  }
}

TEST(Backbone, ZeroLayersIsTheLift) {
  const auto cfg = fixture::tiny(2, 8, 8, 0);
  const auto model = random_model(cfg, 5);
  const auto codes = fixture::random_codes<double>(4, cfg.codec, 6);
  const auto got = model.backbone.forward_full(codes).contexts;
  EXPECT_LT(max_diff(got, oracle::causal_transformer(model.backbone, oracle::to_matrix(codes))),
            1e-12);
}

TEST(Backbone, InBlockRowsSeeEachOtherButNotTheFuture) {
  const auto cfg = fixture::tiny(3, 8, 8, 2);
  const auto model = random_model(cfg, 8);
  auto codes = fixture::random_codes<double>(9, cfg.codec, 1);
  const auto base = model.backbone.forward_full(codes).contexts;

  // Flip the last row of the middle block.
  auto edited = codes;
  for (std::size_t c = 0; c < edited.cols(); ++c) edited(5, c) = -edited(5, c);
  const auto out = model.backbone.forward_full(edited).contexts;
  for (std::size_t r = 0; r < 9; ++r) {
    double diff = 0;
    for (std::size_t c = 0; c < out.cols(); ++c) diff = std::max(diff, std::abs(out(r, c) - base(r, c)));
    if (r < 3) {
      EXPECT_EQ(diff, 0.0) << "row " << r;
    } else {
      EXPECT_GT(diff, 1e-8) << "row " << r;
    }
  }
}

template <typename T>
double kv_gap(int m, std::size_t blocks, std::uint64_t seed) {
  const auto cfg = fixture::tiny(m, 16, 8, 2);
  Model<double> ref = random_model(cfg, seed);
  const Model<T> model = ref.cast<T>();
  const auto codes = fixture::random_codes<T>(blocks * cfg.codec.m(), cfg.codec, seed + 1);
  const auto full = model.backbone.forward_full(codes).contexts;
  KVCache<T> cache;
  double worst = 0;
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto ctx = model.backbone.forward_block(codes.slice_rows(b * cfg.codec.m(), cfg.codec.m()), cache);
    const auto want = full.slice_rows(b * cfg.codec.m(), cfg.codec.m());
    worst = std::max(worst, static_cast<double>(max_abs_diff(ctx, want)));
  }
  EXPECT_EQ(cache.cached_len, blocks * cfg.codec.m());
  return worst;
}

TEST(KVCache, IncrementalMatchesFullFp64) {
  for (int m : {1, 2, 4}) EXPECT_LT(kv_gap<double>(m, 5, 20 + m), 1e-10) << "m=" << m;
}

TEST(KVCache, IncrementalMatchesFullFp32) {
  for (int m : {1, 2, 4}) EXPECT_LT(kv_gap<float>(m, 5, 30 + m), 1e-5) << "m=" << m;
}

TEST(KVCache, FullPassCacheContinuesIncrementally) {
  const auto cfg = fixture::tiny(2, 8, 8, 2);
  const auto model = random_model(cfg, 4);
  const auto codes = fixture::random_codes<double>(8, cfg.codec, 9);
  auto prefix = model.backbone.forward_full(codes.slice_rows(0, 6));
  const auto next = model.backbone.forward_block(codes.slice_rows(6, 2), prefix.cache);
  const auto full = model.backbone.forward_full(codes).contexts;
  EXPECT_LT(max_abs_diff(next, full.slice_rows(6, 2)), 1e-10);
}

TEST(Backbone, ShapeAndCacheErrors) {
  const auto cfg = fixture::tiny(2, 8, 8, 1);
  const auto model = random_model(cfg, 2);
  const auto codes = fixture::random_codes<double>(3, cfg.codec, 1);
  EXPECT_THROW(model.backbone.forward_full(codes), AlignmentError);

  KVCache<double> cache;
  EXPECT_THROW(model.backbone.forward_block(codes, cache), DimensionError);

  cache = model.backbone.forward_full(codes.slice_rows(0, 2)).cache;
  cache.cached_len = 3;
  EXPECT_THROW(model.backbone.forward_block(codes.slice_rows(0, 2), cache), CacheCorruptionError);
  cache.cached_len = 4;
  EXPECT_THROW(model.backbone.forward_block(codes.slice_rows(0, 2), cache), CacheCorruptionError);

  auto short_cfg = cfg;
  short_cfg.backbone.max_seq_len = 4;
  const auto short_model = random_model(short_cfg, 2);
  KVCache<double> c2;
  short_model.backbone.forward_block(codes.slice_rows(0, 2), c2);
  short_model.backbone.forward_block(codes.slice_rows(0, 2), c2);
  EXPECT_THROW(short_model.backbone.forward_block(codes.slice_rows(0, 2), c2), LengthError);
}

TEST(BackboneConfig, Validation) {
  BackboneConfig c;
  c.hidden_size = 10;
  c.num_heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.hidden_size = 12;
  c.num_heads = 4;  // head dim 3 is odd
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.block_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, PackedDocumentsAreIsolated) {
  const auto cfg = fixture::tiny(2, 8, 8, 2);
  const auto model = random_model(cfg, 7);
  const auto a = fixture::random_codes<double>(4, cfg.codec, 1);
  const auto b = fixture::random_codes<double>(6, cfg.codec, 2);
  const std::vector<Tensor<double>> parts = {a, b};
  const auto packed = concat_rows<double>(parts);
  const std::vector<std::int32_t> seg = {0, 0, 0, 0, 1, 1, 1, 1, 1, 1};

  Graph<double> g(Graph<double>::Mode::kInference);
  const auto out = model.backbone.forward_packed(g, g.constant(packed), seg, true).value();
  const auto alone_a = model.backbone.forward_full(a).contexts;
  const auto alone_b = model.backbone.forward_full(b).contexts;
  EXPECT_LT(max_abs_diff(out.slice_rows(0, 4), alone_a), 1e-12);
  EXPECT_LT(max_abs_diff(out.slice_rows(4, 6), alone_b), 1e-12);

  Graph<double> g2(Graph<double>::Mode::kInference);
  const auto open = model.backbone.forward_packed(g2, g2.constant(packed), seg, false).value();
  EXPECT_GT(max_abs_diff(open.slice_rows(4, 6), alone_b), 1e-6);
}

}  // namespace
