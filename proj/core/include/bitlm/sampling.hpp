#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitlm/model.hpp"
#include "bitlm/rng.hpp"

namespace bitlm {

enum class ScheduleKind { kUniform, kCosine };

/// "uniform" | "cosine"; anything else is a ConfigError.
ScheduleKind parse_schedule_kind(const std::string& name);

/// Timestep grid with grid[k] = t_k, so grid.front() == 0 and grid.back() == 1.
struct SamplerSchedule {
  std::vector<double> grid;
  double guidance_scale = 1.0;

  std::size_t steps() const { return grid.empty() ? 0 : grid.size() - 1; }
};

/// Uniform: t_k = k / K. Cosine: t_k = 1 - cos(pi k / 2K). Both end exactly
/// at 0 and 1. Throws DomainError for K == 0.
SamplerSchedule make_schedule(std::size_t steps, ScheduleKind kind = ScheduleKind::kUniform,
                              double guidance_scale = 1.0);

/// uncond + w * (cond - uncond). w == 1 returns `cond` untouched.
template <typename T>
Tensor<T> guide(const Tensor<T>& uncond, const Tensor<T>& cond, double w);

/// (t_km1 / t_k) * state + (1 - t_km1 / t_k) * a0_hat.
template <typename T>
Tensor<T> euler_update(const Tensor<T>& state, const Tensor<T>& a0_hat, double t_k,
                       double t_km1);

/// Guided x0 prediction for `state` at time t. With w == 1 the head runs on
/// the conditional branch only; otherwise both branches go through one
/// stacked head call.
template <typename T>
Tensor<T> guided_prediction(const DiffusionHead<T>& head, const Tensor<T>& state, double t,
                            const Tensor<T>& cond, double w);

/// One update from t_k to t_km1. Requires t_k > t_km1 >= 0.
template <typename T>
Tensor<T> denoise_step(const DiffusionHead<T>& head, const Tensor<T>& state, double t_k,
                       double t_km1, const Tensor<T>& cond, double w);

template <typename T>
struct RealizedBlock {
  Tensor<T> codes;  // m x B, entries in {-1, +1}
  std::vector<TokenId> ids;
  std::size_t fallback_count = 0;
};

/// Gaussian init, K denoising steps, sign projection and decoding.
template <typename T>
RealizedBlock<T> generate_block(const DiffusionHead<T>& head, const CodecConfig& codec,
                                const Tensor<T>& cond, const SamplerSchedule& schedule,
                                Rng& rng);

struct GenerationStats {
  std::size_t backbone_calls = 0;  // forward_block calls, prefill excluded
  std::size_t head_calls = 0;
  std::size_t blocks = 0;
  std::size_t fallback_count = 0;
  double prefill_seconds = 0;
  double decode_seconds = 0;
};

struct GenerateOptions {
  std::size_t max_tokens = 64;
  /// Stop after the block holding the first eos. Disabled, generation always
  /// runs for ceil(max_tokens / m) blocks.
  bool stop_at_eos = true;
  std::uint64_t seed = 0;
};

struct GenerationResult {
  /// Continuation, cut after the first eos when stop_at_eos and never longer
  /// than max_tokens.
  std::vector<TokenId> tokens;
  bool eos_seen = false;
  GenerationStats stats;
};

/// Incremental generation state: KV cache, conditioning for the next block,
/// the sampler's Rng and counters.
template <typename T>
class GenerationSession {
 public:
  GenerationSession(const Model<T>& model, SamplerSchedule schedule, std::uint64_t seed);

  /// Encodes the prompt (bos block, eos padding, no terminator) and runs
  /// forward_full. Throws LengthError past max_seq_len.
  void prefill(std::span<const TokenId> prompt);

  /// Realizes the next block, conditioned on the contexts of the block
  /// before it, and commits it to the cache.
  RealizedBlock<T> step();

  const KVCache<T>& cache() const { return cache_; }
  const Tensor<T>& condition() const { return cond_; }
  const GenerationStats& stats() const { return stats_; }
  GenerationStats& stats() { return stats_; }

 private:
  const Model<T>* model_;
  SamplerSchedule schedule_;
  Rng rng_;
  KVCache<T> cache_;
  Tensor<T> cond_;
  bool prefilled_ = false;
  GenerationStats stats_;
};

template <typename T>
GenerationResult generate(const Model<T>& model, std::span<const TokenId> prompt,
                          const SamplerSchedule& schedule, const GenerateOptions& options);

struct ThroughputRow {
  std::size_t block_size = 0;
  std::size_t tokens = 0;
  std::size_t steps = 0;
  GenerationStats stats;
  double tokens_per_second() const;
};

/// Generates `tokens` tokens with eos stopping disabled for each model and
/// reports the counters and timings.
template <typename T>
std::vector<ThroughputRow> throughput_report(std::span<const Model<T>* const> models,
                                             std::span<const TokenId> prompt,
                                             std::size_t tokens, const SamplerSchedule& schedule,
                                             std::uint64_t seed);

}  // namespace bitlm
