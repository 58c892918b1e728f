#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitlm/adamw.hpp"
#include "bitlm/config.hpp"
#include "bitlm/model.hpp"
#include "bitlm/rng.hpp"

namespace bitlm {

/// One packed training sequence of exactly pack_length positions.
struct Pack {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;
  /// Document index per position; tail filler gets its own segment.
  std::vector<std::int32_t> segments;
  /// Offset of each document's bos block.
  std::vector<std::size_t> doc_starts;
};

struct SkippedSample {
  std::size_t index = 0;
  std::size_t length = 0;
  std::string reason;
};

struct PackingResult {
  std::vector<Pack> packs;
  std::vector<SkippedSample> skipped;
};

/// Encodes every sample with encode_sequence and concatenates them greedily
/// into windows of `pack_length`. Samples never straddle two packs; a pack's
/// unused tail is filled with invalid eos positions.
PackingResult pack_corpus(std::span<const std::vector<TokenId>> samples,
                          const CodecConfig& codec, std::size_t pack_length);

struct PackedBatch {
  std::vector<Pack> sequences;
};

/// Batch for `step`: packs are visited in a per-epoch permutation derived
/// from `seed`, so the batch depends only on (packs, batch_size, seed, step).
PackedBatch batch_for_step(std::span<const Pack> packs, std::size_t batch_size,
                           std::uint64_t seed, std::int64_t step);

/// Contexts of block n-1 (1-based n, block 1 is the bos block). For n == 1
/// the bos block's own contexts are returned.
template <typename T>
Tensor<T> shifted_condition(const Tensor<T>& contexts, std::size_t n, std::size_t block_size);

/// A prediction target: block `block` of a pack, conditioned on `block - 1`.
/// Indices are 0-based.
struct BlockTarget {
  std::size_t sequence = 0;
  std::size_t block = 0;
  std::size_t valid_positions = 0;
};

/// Every block that follows a block of the same document and holds at least
/// one valid position. Bos blocks and all-padding blocks are excluded.
std::vector<BlockTarget> block_targets(const PackedBatch& batch, std::size_t block_size);

/// Noise for one target block.
template <typename T>
struct BlockDraw {
  T t{0};
  Tensor<T> noise;
  bool drop_condition = false;
};

/// Gradient-descent driver for one model. All randomness (timesteps, noise,
/// condition dropout) comes from the trainer's Rng, which is part of the
/// checkpointed state.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T> model, TrainConfig cfg);

  /// Per-target draws in target order: dropout, then t ~ U[0,1], then noise.
  std::vector<BlockDraw<T>> draw(const std::vector<BlockTarget>& targets);
  /// Same draw order from a caller-owned Rng; leaves the trainer's Rng alone.
  std::vector<BlockDraw<T>> draw(const std::vector<BlockTarget>& targets, Rng& rng) const;

  /// Mean over valid target blocks of the per-block diffusion loss. With
  /// `accumulate_grads` the parameter gradients are overwritten with
  /// d(loss)/d(param).
  T compute_loss(const PackedBatch& batch, const std::vector<BlockTarget>& targets,
                 const std::vector<BlockDraw<T>>& draws, bool accumulate_grads) const;

  /// Loss on `batch` under draws from Rng(seed), without gradients or
  /// updates.
  T evaluate(const PackedBatch& batch, std::uint64_t seed) const;

  /// Draws noise, computes the loss and gradients, applies one AdamW update.
  /// Throws NonFiniteLossError before touching the weights if the loss is
  /// not finite.
  T train_step(const PackedBatch& batch);

  /// Learning rate at 0-based `step`: linear warmup then constant.
  double lr_at(std::int64_t step) const;

  const Model<T>& model() const { return model_; }
  Model<T>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const AdamState<T>& optimizer() const { return opt_; }
  AdamState<T>& optimizer() { return opt_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

 private:
  Model<T> model_;
  TrainConfig cfg_;
  AdamState<T> opt_;
  Rng rng_;
  std::int64_t step_ = 0;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace bitlm
