// bitlm: train, sample, verify and benchmark binary-code block diffusion
// language models.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bitlm/checkpoint.hpp"
#include "bitlm/errors.hpp"
#include "bitlm/grammar.hpp"
#include "bitlm/harness.hpp"
#include "bitlm/metrics.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/verify.hpp"

namespace {

using namespace bitlm;
using nlohmann::json;

enum Exit { kOk = 0, kFailure = 1, kBadInput = 2, kNonFinite = 3 };

void emit(bool jsonl, const std::string& kind, const json& rec, const std::string& human) {
  if (jsonl) {
    std::cout << format_record(kind, rec) << '\n';
  } else if (!human.empty()) {
    std::cout << human << '\n';
  }
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

struct TrainArgs {
  std::string config, corpus, out;
  std::string resume;
  std::int64_t stop_after = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  try {
    rc = load_run_config(a.config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadInput;
  }
  std::vector<std::string> lines;
  try {
    lines = read_corpus(a.corpus);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kBadInput;
  }
  TrainOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = a.resume;
  opts.stop_after = a.stop_after;
  const std::int64_t every = std::max<std::int64_t>(1, rc.train.total_steps / 20);
  opts.on_record = [&](const json& r) {
    if (a.quiet || !r.contains("loss")) return;
    const auto step = r["step"].get<std::int64_t>();
    if (step % every == 0 || step + 1 == rc.train.total_steps) {
      std::cout << "step " << step << "  loss " << fixed(r["loss"].get<double>(), 5) << "  lr "
                << r["lr"].get<double>() << '\n';
    }
  };
  try {
    const TrainSummary s = run_training(rc, lines, opts);
    std::cout << "trained steps " << s.first_step << ".." << s.steps_done << " on " << s.packs
              << " packs (" << s.skipped << " samples skipped) in " << fixed(s.seconds, 2)
              << " s\ncheckpoint " << s.last_checkpoint.string() << '\n';
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadInput;
  } catch (const OutOfVocabularyError& e) {
    std::cerr << "tokenization error: " << e.what() << '\n';
    return kBadInput;
  } catch (const NonFiniteLossError& e) {
    std::cerr << e.what() << "\ndiagnostics: " << e.diagnostics() << '\n';
    return kNonFinite;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kBadInput;
  }
  return kOk;
}

struct SamplerArgs {
  std::size_t steps = 15;
  double cfg = 9.0;
  std::string schedule = "uniform";
  std::uint64_t seed = 0;

  SamplerSchedule make() const {
    return make_schedule(steps, parse_schedule_kind(schedule), cfg);
  }
};

void add_sampler_flags(CLI::App* app, SamplerArgs& s) {
  app->add_option("-K,--steps", s.steps, "denoising steps per block")->capture_default_str();
  app->add_option("--cfg", s.cfg, "classifier-free guidance scale (1 disables)")
      ->capture_default_str();
  app->add_option("--schedule", s.schedule, "timestep grid")
      ->check(CLI::IsMember({"uniform", "cosine"}))
      ->capture_default_str();
  app->add_option("--seed", s.seed, "sampler seed")->capture_default_str();
}

struct GenerateArgs {
  std::string checkpoint, prompt;
  std::size_t max_tokens = 64;
  bool report = false, ignore_eos = false, jsonl = false;
  SamplerArgs sampler;
};

int cmd_generate(const GenerateArgs& a) {
  std::optional<InferenceBundle> bundle;
  try {
    bundle.emplace(load_for_inference(a.checkpoint));
  } catch (const std::exception& e) {
    std::cerr << "cannot load checkpoint: " << e.what() << '\n';
    return kBadInput;
  }
  std::vector<TokenId> prompt;
  try {
    prompt = bundle->tokenizer.encode(a.prompt);
  } catch (const OutOfVocabularyError& e) {
    std::cerr << "prompt tokenization failed: " << e.what() << '\n';
    return kBadInput;
  }
  GenerateOptions opts;
  opts.max_tokens = a.max_tokens;
  opts.stop_at_eos = !a.ignore_eos;
  opts.seed = a.sampler.seed;
  GenerationResult r;
  try {
    r = generate<float>(bundle->model, prompt, a.sampler.make(), opts);
  } catch (const LengthError& e) {
    std::cerr << "prompt too long: " << e.what() << '\n';
    return kBadInput;
  }
  const std::string text = bundle->tokenizer.decode(r.tokens);
  const GenerationStats& st = r.stats;
  if (a.jsonl) {
    json rec = {{"prompt", a.prompt},
                {"text", text},
                {"tokens", r.tokens},
                {"eos", r.eos_seen},
                {"block_size", bundle->model.codec.m()},
                {"steps", a.sampler.steps},
                {"guidance_scale", a.sampler.cfg},
                {"seed", a.sampler.seed},
                {"fallback_tokens", st.fallback_count},
                {"backbone_calls", st.backbone_calls},
                {"head_calls", st.head_calls},
                {"prefill_seconds", st.prefill_seconds},
                {"decode_seconds", st.decode_seconds}};
    std::cout << format_record("generation", rec) << '\n';
    return kOk;
  }
  std::cout << text << '\n';
  if (a.report) {
    std::cerr << "tokens          " << r.tokens.size() << (r.eos_seen ? " (stopped at eos)" : "")
              << "\nfallback tokens " << st.fallback_count << "\nbackbone calls  "
              << st.backbone_calls << "\nhead calls      " << st.head_calls
              << "\nprefill         " << fixed(st.prefill_seconds * 1e3, 3) << " ms"
              << "\ndecode          " << fixed(st.decode_seconds * 1e3, 3) << " ms\n";
  }
  return kOk;
}

struct VerifyArgs {
  std::string checkpoint;
  std::vector<std::string> faults;
  std::uint64_t seed = 0;
  bool jsonl = false;
};

int cmd_verify(const VerifyArgs& a) {
  std::optional<InferenceBundle> bundle;
  if (!a.checkpoint.empty()) {
    try {
      bundle.emplace(load_for_inference(a.checkpoint));
    } catch (const std::exception& e) {
      std::cerr << "cannot load checkpoint: " << e.what() << '\n';
      return kBadInput;
    }
  }
  VerifyOptions opts;
  opts.seed = a.seed;
  opts.faults = a.faults;
  std::vector<PropertyResult> results;
  try {
    results = run_verify_suite(opts, bundle ? &bundle->model : nullptr);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kBadInput;
  }
  std::size_t failed = 0;
  for (const auto& r : results) {
    failed += r.passed ? 0 : 1;
    emit(a.jsonl, "property", r.to_json(),
         std::string(r.passed ? "PASS " : "FAIL ") + r.name + "  " + r.detail);
  }
  emit(a.jsonl, "verify_summary",
       {{"properties", results.size()}, {"failed", failed}, {"passed", failed == 0}},
       std::to_string(results.size() - failed) + "/" + std::to_string(results.size()) +
           " properties hold");
  return failed == 0 ? kOk : kFailure;
}

struct BenchArgs {
  std::vector<std::string> checkpoints;
  std::string config;
  std::vector<int> block_sizes = {1, 2, 4, 8};
  std::size_t tokens = 64;
  std::string prompt;
  std::string out;
  bool jsonl = false;
  SamplerArgs sampler;
};

int cmd_bench(const BenchArgs& a) {
  std::vector<Model<float>> models;
  std::optional<ToyTokenizer> tokenizer;
  if (!a.checkpoints.empty()) {
    for (const auto& path : a.checkpoints) {
      try {
        InferenceBundle b = load_for_inference(path);
        if (!models.empty()) {
          const CodecConfig& ref = models.front().codec;
          const CodecConfig& c = b.model.codec;
          if (c.vocab_size != ref.vocab_size || c.code_length != ref.code_length ||
              c.bos_id != ref.bos_id || c.eos_id != ref.eos_id) {
            std::cerr << "codec mismatch: " << path << " has " << to_json(c).dump()
                      << ", first checkpoint has " << to_json(ref).dump() << '\n';
            return kBadInput;
          }
        }
        tokenizer = b.tokenizer;
        models.push_back(std::move(b.model));
      } catch (const std::exception& e) {
        std::cerr << "cannot load " << path << ": " << e.what() << '\n';
        return kBadInput;
      }
    }
  } else {
    RunConfig rc;
    try {
      if (!a.config.empty()) rc = load_run_config(a.config);
      tokenizer = ToyTokenizer::from_settings(rc.tokenizer, std::vector<std::string>{"ab"});
      for (int m : a.block_sizes) {
        rc.block_size = m;
        rc.validate();
        models.push_back(Model<float>::create(model_config_for(rc, *tokenizer), a.sampler.seed));
      }
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kBadInput;
    }
  }
  std::vector<TokenId> prompt;
  try {
    prompt = tokenizer->encode(a.prompt);
  } catch (const OutOfVocabularyError& e) {
    std::cerr << "prompt tokenization failed: " << e.what() << '\n';
    return kBadInput;
  }
  std::vector<const Model<float>*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const auto rows =
      throughput_report<float>(ptrs, prompt, a.tokens, a.sampler.make(), a.sampler.seed);

  std::unique_ptr<RecordWriter> out;
  if (!a.out.empty()) out = std::make_unique<RecordWriter>(a.out, true);
  if (!a.jsonl) {
    std::cout << "   m  tokens  backbone  expected  head  expected  prefill_ms  decode_ms  "
                 "ms/token  tokens/s\n";
  }
  for (const auto& r : rows) {
    const std::size_t blocks = (a.tokens + r.block_size - 1) / r.block_size;
    const json rec = {{"block_size", r.block_size},
                      {"tokens", r.tokens},
                      {"steps", r.steps},
                      {"backbone_calls", r.stats.backbone_calls},
                      {"expected_backbone_calls", blocks},
                      {"head_calls", r.stats.head_calls},
                      {"expected_head_calls", blocks * r.steps},
                      {"prefill_seconds", r.stats.prefill_seconds},
                      {"decode_seconds", r.stats.decode_seconds},
                      {"tokens_per_second", r.tokens_per_second()}};
    if (out) out->write("bench", rec);
    char line[256];
    std::snprintf(line, sizeof(line), "%4zu  %6zu  %8zu  %8zu  %4zu  %8zu  %10.3f  %9.3f  %8.4f  %8.1f",
                  r.block_size, r.tokens, r.stats.backbone_calls, blocks, r.stats.head_calls,
                  blocks * r.steps, r.stats.prefill_seconds * 1e3, r.stats.decode_seconds * 1e3,
                  r.tokens ? r.stats.decode_seconds * 1e3 / static_cast<double>(r.tokens) : 0.0,
                  r.tokens_per_second());
    emit(a.jsonl, "bench", rec, line);
  }
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, grammar = "anbn";
  std::size_t samples = 100;
  bool jsonl = false;
  SamplerArgs sampler;
};

int cmd_eval_grammar(const EvalArgs& a) {
  std::optional<InferenceBundle> bundle;
  try {
    bundle.emplace(load_for_inference(a.checkpoint));
  } catch (const std::exception& e) {
    std::cerr << "cannot load checkpoint: " << e.what() << '\n';
    return kBadInput;
  }
  const Grammar grammar = Grammar::parse(a.grammar);
  const GrammarEval ev = eval_grammar<float>(bundle->model, bundle->tokenizer, grammar, a.samples,
                                             a.sampler.seed, a.sampler.make());
  const json rec = {{"grammar", a.grammar},
                    {"samples", ev.samples},
                    {"valid", ev.valid},
                    {"validity", ev.validity()},
                    {"unterminated", ev.unterminated},
                    {"fallback_tokens", ev.fallback_tokens},
                    {"steps", a.sampler.steps},
                    {"guidance_scale", a.sampler.cfg},
                    {"seed", a.sampler.seed},
                    {"examples", ev.examples}};
  std::string human = a.grammar + " validity " + fixed(ev.validity(), 3) + " (" +
                      std::to_string(ev.valid) + "/" + std::to_string(ev.samples) + ", " +
                      std::to_string(ev.unterminated) + " unterminated)";
  for (const auto& e : ev.examples) human += "\n  " + e;
  emit(a.jsonl, "grammar_eval", rec, human);
  return kOk;
}

int cmd_corpus(const std::string& grammar_name, std::size_t count, std::uint64_t seed,
               const std::string& out) {
  const Grammar grammar = Grammar::parse(grammar_name);
  std::ofstream f(out);
  if (!f) {
    std::cerr << "cannot write " << out << '\n';
    return kFailure;
  }
  for (const auto& s : grammar.sample(count, seed)) f << s << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary-code block diffusion language model toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model on a line-per-sample corpus");
  t->add_option("--config", train.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--corpus", train.corpus, "UTF-8 corpus, one sample per line")
      ->required()
      ->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--resume", train.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--stop-after", train.stop_after, "stop once this many steps are done");
  t->add_flag("-q,--quiet", train.quiet, "no per-step output");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "sample a continuation");
  g->add_option("--checkpoint", gen.checkpoint)->required()->check(CLI::ExistingFile);
  g->add_option("--prompt", gen.prompt, "prompt text");
  g->add_option("--max-tokens", gen.max_tokens)->capture_default_str();
  g->add_flag("--report", gen.report, "print counters and timings to stderr");
  g->add_flag("--ignore-eos", gen.ignore_eos, "keep generating past eos");
  g->add_flag("--jsonl", gen.jsonl, "machine-readable output");
  add_sampler_flags(g, gen.sampler);

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "run the structural property suite");
  v->add_option("--checkpoint", ver.checkpoint, "also check these weights")
      ->check(CLI::ExistingFile);
  v->add_option("--inject-fault", ver.faults, "deliberately break a component (mask)");
  v->add_option("--seed", ver.seed)->capture_default_str();
  v->add_flag("--jsonl", ver.jsonl, "machine-readable output");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "count backbone/head calls and time decoding per m");
  b->add_option("--checkpoint", bench.checkpoints, "one checkpoint per block size")
      ->check(CLI::ExistingFile);
  b->add_option("--config", bench.config, "fresh models from this config when no checkpoints")
      ->check(CLI::ExistingFile);
  b->add_option("--block-sizes", bench.block_sizes, "block sizes for fresh models")
      ->delimiter(',')
      ->capture_default_str();
  b->add_option("-T,--tokens", bench.tokens, "tokens to generate")->capture_default_str();
  b->add_option("--prompt", bench.prompt, "prompt text");
  b->add_option("--out", bench.out, "write JSON Lines records here");
  b->add_flag("--jsonl", bench.jsonl, "machine-readable output");
  add_sampler_flags(b, bench.sampler);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval-grammar", "fraction of generations a grammar accepts");
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--grammar", ev.grammar)
      ->check(CLI::IsMember({"anbn", "add3"}))
      ->capture_default_str();
  e->add_option("-n,--samples", ev.samples)->capture_default_str();
  e->add_flag("--jsonl", ev.jsonl, "machine-readable output");
  add_sampler_flags(e, ev.sampler);

  std::string corpus_grammar = "anbn", corpus_out;
  std::size_t corpus_count = 1000;
  std::uint64_t corpus_seed = 0;
  auto* c = app.add_subcommand("corpus", "write a synthetic grammar corpus");
  c->add_option("--grammar", corpus_grammar)
      ->check(CLI::IsMember({"anbn", "add3"}))
      ->capture_default_str();
  c->add_option("--count", corpus_count)->capture_default_str();
  c->add_option("--seed", corpus_seed)->capture_default_str();
  c->add_option("--out", corpus_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*t) return cmd_train(train);
    if (*g) return cmd_generate(gen);
    if (*v) return cmd_verify(ver);
    if (*b) return cmd_bench(bench);
    if (*e) return cmd_eval_grammar(ev);
    if (*c) return cmd_corpus(corpus_grammar, corpus_count, corpus_seed, corpus_out);
  } catch (const DomainError& err) {
    std::cerr << err.what() << '\n';
    return kBadInput;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kFailure;
  }
  return kOk;
}
