#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "bitlm/adamw.hpp"
#include "bitlm/model.hpp"

namespace bitlm {

struct TokenizerSettings {
  std::string mode = "byte";  // byte | char | grammar
  std::string grammar = "anbn";

  friend bool operator==(const TokenizerSettings&, const TokenizerSettings&) = default;
};

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  int batch_size = 8;
  int pack_length = 512;
  std::int64_t total_steps = 1000;
  std::uint64_t seed = 0;
  double cond_dropout_p = 0.1;
  std::int64_t checkpoint_interval = 500;
  double warmup_frac = 0.01;
  bool isolate_documents = true;
  std::string precision = "fp32";  // fp32 | fp64

  AdamWHyper adamw() const { return {lr, beta1, beta2, weight_decay, adam_eps}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct SamplerConfig {
  int steps = 15;
  std::string schedule = "uniform";  // uniform | cosine
  double guidance_scale = 9.0;

  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

/// Everything a run needs. The codec's vocabulary and special ids come from
/// the tokenizer; the remaining model dimensions live here.
struct RunConfig {
  int block_size = 4;
  int code_length = 0;  // 0 derives ceil(log2 V)
  std::int32_t fallback_id = -1;  // -1 falls back to eos
  TokenizerSettings tokenizer;
  BackboneConfig backbone;
  HeadConfig head;
  TrainConfig train;
  SamplerConfig sampler;

  /// Checks every field; throws ConfigError naming the offending field.
  void validate() const;

  /// `default_fallback` applies when fallback_id is -1; without it the
  /// codec falls back to eos.
  ModelConfig model_config(std::int64_t vocab_size, std::int32_t bos_id, std::int32_t eos_id,
                           std::optional<std::int32_t> default_fallback = {}) const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Strict JSON mapping: unknown keys raise ConfigError with the key path.
nlohmann::json to_json(const CodecConfig& c);
nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const HeadConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const RunConfig& c);

CodecConfig codec_from_json(const nlohmann::json& j);
BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& path = "backbone");
HeadConfig head_from_json(const nlohmann::json& j, const std::string& path = "head");
ModelConfig model_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace bitlm
