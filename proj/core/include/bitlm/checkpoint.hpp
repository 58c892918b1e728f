#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bitlm/model.hpp"
#include "bitlm/training.hpp"

namespace bitlm {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// One named tensor as stored on disk: little-endian f32 or f64 values.
struct StoredTensor {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" | "f64"
  std::vector<std::uint8_t> bytes;

  template <typename T>
  Tensor<T> as() const;
};

/// File layout:
///   "BITLMCKP" | u32 format version | u64 header length | header JSON |
///   u32 crc32(header) | tensor blobs
/// The header carries the configs, training state scalars and a tensor
/// directory (name, shape, dtype, offset, nbytes, crc32) into the blob area.
struct Checkpoint {
  std::uint32_t format_version = kCheckpointFormatVersion;
  /// "model" (codec/backbone/head), "run_config", "tokenizer", "step",
  /// "rng_state", "optimizer_step", "dtype".
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  ModelConfig model_config() const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws CheckpointError on bad magic, version mismatch, malformed header
/// or checksum failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
StoredTensor store_tensor(std::string name, const Tensor<T>& t);

/// Weights only.
template <typename T>
Checkpoint make_checkpoint(const Model<T>& model);

/// Weights, optimizer moments, RNG state and step.
template <typename T>
Checkpoint make_checkpoint(const Trainer<T>& trainer);

/// Copies stored weights into `model`. Refuses when the stored model config
/// (codec B, vocabulary, dimensions) differs from the model's.
template <typename T>
void restore_model(const Checkpoint& ckpt, Model<T>& model);

template <typename T>
Model<T> load_model(const Checkpoint& ckpt);

/// Restores weights, optimizer moments, RNG state and step.
template <typename T>
void restore_trainer(const Checkpoint& ckpt, Trainer<T>& trainer);

}  // namespace bitlm
