#include "bitlm/harness.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "bitlm/errors.hpp"
#include "bitlm/metrics.hpp"

namespace bitlm {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> read_corpus(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

TokenizedCorpus tokenize_corpus(const TokenizerSettings& settings,
                                const std::vector<std::string>& lines) {
  TokenizedCorpus out{ToyTokenizer::from_settings(settings, lines), {}};
  out.samples.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      out.samples.push_back(out.tokenizer.encode(lines[i]));
    } catch (const OutOfVocabularyError& e) {
      throw OutOfVocabularyError("corpus line " + std::to_string(i + 1) + ": " + e.what());
    }
    out.samples.back().push_back(out.tokenizer.eos_id());
  }
  return out;
}

ModelConfig model_config_for(const RunConfig& rc, const ToyTokenizer& tokenizer) {
  return rc.model_config(tokenizer.vocab_size(), tokenizer.bos_id(), tokenizer.eos_id(),
                         tokenizer.pad_id());
}

template <typename T>
Checkpoint make_run_checkpoint(const Trainer<T>& trainer, const RunConfig& rc,
                               const ToyTokenizer& tokenizer) {
  Checkpoint ckpt = make_checkpoint(trainer);
  ckpt.meta["run_config"] = to_json(rc);
  ckpt.meta["tokenizer"] = tokenizer.to_json();
  return ckpt;
}

namespace {

fs::path step_checkpoint(const fs::path& dir, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step-%08lld.ckpt", static_cast<long long>(step));
  return dir / name;
}

// Keeps the records of steps before `resume_step` so a resumed run writes
// the same stream as an uninterrupted one.
void trim_metrics(const fs::path& path, std::int64_t resume_step) {
  if (!fs::exists(path)) return;
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      const json rec = json::parse(line, nullptr, false);
      if (rec.is_discarded()) continue;
      if (rec.value("kind", "") == "train" && rec.value("step", std::int64_t{0}) < resume_step) {
        kept.push_back(line);
      }
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

template <typename T>
TrainSummary train_impl(const RunConfig& rc, const TokenizedCorpus& corpus,
                        const PackingResult& packing, const ModelConfig& mc,
                        const TrainOptions& options) {
  using Clock = std::chrono::steady_clock;
  Trainer<T> trainer(Model<T>::create(mc, rc.train.seed), rc.train);
  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    if (ckpt.meta.contains("tokenizer") &&
        ToyTokenizer::from_json(ckpt.meta.at("tokenizer")) != corpus.tokenizer) {
      throw CheckpointError("resume checkpoint was trained with a different tokenizer");
    }
    restore_trainer(ckpt, trainer);
  }

  TrainSummary summary;
  summary.first_step = trainer.step();
  summary.packs = packing.packs.size();
  summary.skipped = packing.skipped.size();

  fs::create_directories(options.out_dir);
  const fs::path metrics_path = options.out_dir / "metrics.jsonl";
  if (options.resume) trim_metrics(metrics_path, trainer.step());
  RecordWriter metrics(metrics_path, !options.resume.has_value());

  std::int64_t end = rc.train.total_steps;
  if (options.stop_after >= 0) end = std::min(end, options.stop_after);
  const auto start = Clock::now();
  const auto interval = rc.train.checkpoint_interval;
  const auto batch_size = static_cast<std::size_t>(rc.train.batch_size);

  while (trainer.step() < end) {
    const std::int64_t step = trainer.step();
    const PackedBatch batch = batch_for_step(packing.packs, batch_size, rc.train.seed, step);
    const double lr = trainer.lr_at(step);
    T loss{};
    try {
      loss = trainer.train_step(batch);
    } catch (const NonFiniteLossError& e) {
      json rec = {{"step", step}, {"error", e.what()},
                  {"diagnostics", json::parse(e.diagnostics(), nullptr, false)}};
      metrics.write("error", rec);
      if (options.on_record) options.on_record(rec);
      throw;
    }
    const double elapsed = std::chrono::duration<double>(Clock::now() - start).count();
    json rec = {{"step", step},
                {"loss", static_cast<double>(loss)},
                {"lr", lr},
                {"wall_clock", elapsed}};
    metrics.write("train", rec);
    if (options.on_record) options.on_record(rec);
    summary.losses.push_back(static_cast<double>(loss));
    if (interval > 0 && trainer.step() % interval == 0) {
      save_checkpoint(step_checkpoint(options.out_dir, trainer.step()),
                      make_run_checkpoint(trainer, rc, corpus.tokenizer));
    }
  }
  summary.steps_done = trainer.step();
  summary.last_checkpoint = options.out_dir / "latest.ckpt";
  save_checkpoint(summary.last_checkpoint, make_run_checkpoint(trainer, rc, corpus.tokenizer));
  summary.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return summary;
}

}  // namespace

TrainSummary run_training(const RunConfig& rc, const std::vector<std::string>& lines,
                          const TrainOptions& options) {
  rc.validate();
  const TokenizedCorpus corpus = tokenize_corpus(rc.tokenizer, lines);
  const ModelConfig mc = model_config_for(rc, corpus.tokenizer);
  const PackingResult packing =
      pack_corpus(corpus.samples, mc.codec, static_cast<std::size_t>(rc.train.pack_length));
  if (packing.packs.empty()) {
    throw ConfigError("train.pack_length: no corpus sample fits in " +
                      std::to_string(rc.train.pack_length) + " positions");
  }
  if (rc.train.precision == "fp64") return train_impl<double>(rc, corpus, packing, mc, options);
  return train_impl<float>(rc, corpus, packing, mc, options);
}

InferenceBundle load_for_inference(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("tokenizer")) {
    throw CheckpointError(path.string() + " carries no tokenizer; it was not written by a run");
  }
  ToyTokenizer tokenizer = ToyTokenizer::from_json(ckpt.meta.at("tokenizer"));
  const ModelConfig mc = ckpt.model_config();
  if (mc.codec.vocab_size != tokenizer.vocab_size()) {
    throw CheckpointError("checkpoint codec vocabulary disagrees with its tokenizer");
  }
  Model<float> model =
      ckpt.meta.value("dtype", "f32") == "f64" ? load_model<double>(ckpt).cast<float>()
                                               : load_model<float>(ckpt);
  return {std::move(model), std::move(tokenizer), ckpt.meta.value("run_config", json::object())};
}

template Checkpoint make_run_checkpoint<float>(const Trainer<float>&, const RunConfig&,
                                               const ToyTokenizer&);
template Checkpoint make_run_checkpoint<double>(const Trainer<double>&, const RunConfig&,
                                                const ToyTokenizer&);

}  // namespace bitlm
