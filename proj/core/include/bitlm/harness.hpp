#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bitlm/checkpoint.hpp"
#include "bitlm/config.hpp"
#include "bitlm/model.hpp"
#include "bitlm/tokenizer.hpp"
#include "bitlm/training.hpp"

namespace bitlm {

/// One sample per line; a trailing '\r' is dropped.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

struct TokenizedCorpus {
  ToyTokenizer tokenizer;
  /// Every sample ends with an explicit eos, so samples whose length is a
  /// multiple of m still carry a terminator.
  std::vector<std::vector<TokenId>> samples;
};

/// Throws OutOfVocabularyError for text the tokenizer cannot encode.
TokenizedCorpus tokenize_corpus(const TokenizerSettings& settings,
                                const std::vector<std::string>& lines);

ModelConfig model_config_for(const RunConfig& rc, const ToyTokenizer& tokenizer);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Stop (and checkpoint) once this many steps are done, before
  /// total_steps. Negative runs to completion.
  std::int64_t stop_after = -1;
  /// Called with every metrics record as it is written.
  std::function<void(const nlohmann::json&)> on_record;
};

struct TrainSummary {
  std::int64_t first_step = 0;
  std::int64_t steps_done = 0;  // global step count at exit
  std::vector<double> losses;   // one per step run in this call
  std::size_t packs = 0;
  std::size_t skipped = 0;
  std::filesystem::path last_checkpoint;
  double seconds = 0;
};

/// Checkpoint names: step-<8 digit step>.ckpt at every checkpoint_interval
/// and latest.ckpt at exit. Metrics go to metrics.jsonl; a resumed run
/// first drops records at or past the resumed step.
///
/// Throws ConfigError, OutOfVocabularyError, CheckpointError or
/// NonFiniteLossError (after writing a diagnostics record).
TrainSummary run_training(const RunConfig& rc, const std::vector<std::string>& lines,
                          const TrainOptions& options);

/// A checkpoint ready for generation.
struct InferenceBundle {
  Model<float> model;
  ToyTokenizer tokenizer;
  nlohmann::json run_config;
};

InferenceBundle load_for_inference(const std::filesystem::path& checkpoint);

/// Checkpoint with the run config and tokenizer echoed into its header.
template <typename T>
Checkpoint make_run_checkpoint(const Trainer<T>& trainer, const RunConfig& rc,
                               const ToyTokenizer& tokenizer);

}  // namespace bitlm
