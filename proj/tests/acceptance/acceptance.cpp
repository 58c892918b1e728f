// One line per acceptance criterion; exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bitlm/checkpoint.hpp"
#include "bitlm/codec.hpp"
#include "bitlm/grammar.hpp"
#include "bitlm/harness.hpp"
#include "bitlm/ops.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/training.hpp"
#include "bitlm/verify.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using namespace bitlm;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

const fs::path kRoot = BITLM_SOURCE_DIR;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Model<double> random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<double> m(cfg);
  randomize_parameters(m, seed, 0.4);
  return m;
}

Verdict codec_roundtrip() {
  const auto start = Clock::now();
  const auto cfg = CodecConfig::make(4096, 4, 4094, 4095);
  std::size_t mismatches = 0;
  for (TokenId id = 0; id < 4096; ++id) {
    const auto bits = oracle::bits_of(id, 12);
    const std::vector<double> v(bits.begin(), bits.end());
    if (decode_bits<double>(v, cfg).id != id) ++mismatches;
    if (decode_code(encode_token(id, cfg), cfg) != id) ++mismatches;
  }
  // V = 3000 inside B = 12 leaves 1096 unassigned patterns.
  const auto sparse = CodecConfig::make(3000, 4, 2998, 2999, TokenId{7}, 12);
  std::size_t unassigned = 0, to_fallback = 0;
  for (std::int64_t p = 3000; p < 4096; ++p) {
    const auto bits = oracle::bits_of(p, 12);
    const std::vector<double> v(bits.begin(), bits.end());
    const Decoded d = decode_bits<double>(v, sparse);
    ++unassigned;
    if (d.fallback && d.id == 7) ++to_fallback;
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && to_fallback == unassigned && unassigned == 4096 - 3000 && secs < 1.0,
          "mismatches=" + std::to_string(mismatches) + " fallback " + std::to_string(to_fallback) +
              "/" + std::to_string(unassigned) + " in " + fmt("%.3f s", secs)};
}

Verdict mask_oracle() {
  std::size_t wrong = 0, checked = 0;
  for (std::size_t m = 1; m <= 4; ++m) {
    for (std::size_t L = 1; L <= 12; ++L) {
      const auto mask = build_mask<double>(L, m);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          ++checked;
          const double want = oracle::block_visible(i, j, m) ? 0.0 : ops::kMaskedOut;
          if (mask(i, j) != want) ++wrong;
          if (m == 1 && mask(i, j) != (j <= i ? 0.0 : ops::kMaskedOut)) ++wrong;
        }
      }
    }
  }
  return {wrong == 0, std::to_string(checked) + " entries, " + std::to_string(wrong) + " wrong"};
}

Verdict m1_reduction(double tol) {
  const auto cfg = fixture::tiny(1, 16, 16, 2);
  const auto model = random_model(cfg, 101);
  const auto codes = fixture::random_codes<double>(8, cfg.codec, 102);
  const auto got = model.backbone.forward_full(codes).contexts;
  const auto want = oracle::causal_transformer(model.backbone, oracle::to_matrix(codes));
  double err = 0;
  for (std::size_t r = 0; r < got.rows(); ++r) {
    for (std::size_t c = 0; c < got.cols(); ++c) err = std::max(err, std::abs(got(r, c) - want[r][c]));
  }
  return {err < tol, "max abs err " + fmt("%.3g", err)};
}

template <typename T>
double kv_error(int m, std::uint64_t seed) {
  const auto cfg = fixture::tiny(m, 16, 16, 2);
  const Model<T> model = random_model(cfg, seed).template cast<T>();
  const std::size_t mm = cfg.codec.m();
  const auto codes = fixture::random_codes<T>(4 * mm, cfg.codec, seed + 1);
  const auto full = model.backbone.forward_full(codes).contexts;
  KVCache<T> cache;
  double err = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    const auto ctx = model.backbone.forward_block(codes.slice_rows(b * mm, mm), cache);
    err = std::max(err, static_cast<double>(max_abs_diff(ctx, full.slice_rows(b * mm, mm))));
  }
  return err;
}

Verdict kv_equivalence(double tol64, double tol32) {
  double e64 = 0, e32 = 0;
  for (int m : {1, 2, 4}) {
    e64 = std::max(e64, kv_error<double>(m, 200 + m));
    e32 = std::max(e32, kv_error<float>(m, 300 + m));
  }
  return {e64 < tol64 && e32 < tol32, "fp64 " + fmt("%.3g", e64) + ", fp32 " + fmt("%.3g", e32)};
}

Verdict gradient_suite(double tol) {
  const auto start = Clock::now();
  const auto cfg = fixture::tiny(2, 8, 8, 1);  // B = 3
  Model<double> model(cfg);
  randomize_parameters(model, 400, 0.5);
  Trainer<double> tr(std::move(model), TrainConfig{});
  const std::vector<std::vector<TokenId>> samples = {{1, 2, 3}, {4, 5}, {0, 1, 2, 3, 4}};
  const PackedBatch batch{pack_corpus(samples, cfg.codec, 16).packs};
  const auto targets = block_targets(batch, 2);
  Rng rng(401);
  auto draws = tr.draw(targets, rng);
  draws[0].drop_condition = true;
  for (std::size_t i = 1; i < draws.size(); ++i) draws[i].drop_condition = false;
  tr.compute_loss(batch, targets, draws, true);
  auto loss = [&] { return tr.compute_loss(batch, targets, draws, false); };
  double worst = 0;
  std::string worst_name;
  std::size_t groups = 0;
  for (Parameter<double>* p : tr.model().parameters()) {
    const std::vector<double> analytic(p->grad.data().begin(), p->grad.data().end());
    const auto numeric = oracle::numeric_gradient(p->value.data(), loss);
    const double e = oracle::relative_error(analytic, numeric);
    ++groups;
    if (e > worst) {
      worst = e;
      worst_name = p->name;
    }
  }
  const double secs = seconds_since(start);
  return {worst < tol && secs < 120,
          std::to_string(groups) + " groups, worst " + fmt("%.3g", worst) + " (" + worst_name +
              ") in " + fmt("%.1f s", secs)};
}

double cross_jacobian(bool mix) {
  auto cfg = fixture::tiny(3, 8, 8, 2);
  cfg.head.mix_positions = mix;
  Model<double> model(cfg);
  randomize_parameters(model, 500, 0.5);
  const auto x = fixture::gaussian<double>(3, cfg.codec.bits(), 501);
  const auto cond = fixture::gaussian<double>(3, cfg.backbone.d(), 502);
  const std::vector<double> t = {0.5};
  const double h = 1e-5;
  double worst = 0;
  // d(row i) / d(row j), i != j, by central differences on every input entry
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      auto up = x, down = x;
      up(j, c) += h;
      down(j, c) -= h;
      const auto fu = model.head.denoise(up, t, cond), fd = model.head.denoise(down, t, cond);
      for (std::size_t i = 0; i < 3; ++i) {
        if (i == j) continue;
        for (std::size_t k = 0; k < fu.cols(); ++k) {
          worst = std::max(worst, std::abs(fu(i, k) - fd(i, k)) / (2 * h));
        }
      }
    }
  }
  return worst;
}

Verdict joint_realization() {
  const double mixed = cross_jacobian(true), factorized = cross_jacobian(false);
  return {mixed > 1e-6 && factorized == 0.0,
          "mixing " + fmt("%.3g", mixed) + ", factorized " + fmt("%.3g", factorized)};
}

Verdict sampler_identities() {
  std::vector<std::string> broken;
  const auto clean = fixture::random_codes<double>(4, CodecConfig::make(16, 4, 14, 15), 600);
  const auto noise = fixture::gaussian<double>(4, 4, 601);
  if (!(forward_noise(clean, 0.0, noise).values == clean)) broken.push_back("t=0");
  if (!(forward_noise(clean, 1.0, noise).values == noise)) broken.push_back("t=1");

  const auto cfg = fixture::tiny(4, 16, 8, 2);
  Model<double> model(cfg);
  randomize_parameters(model, 602, 0.5);
  const auto cond = fixture::gaussian<double>(4, cfg.backbone.d(), 603);
  const std::size_t m = 4, B = cfg.codec.bits();
  auto initial = [&](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> a(m, B);
    for (auto& v : a.data()) v = rng.normal();
    return a;
  };

  for (double w : {1.0, 9.0}) {
    Rng rng(604);
    const auto block = generate_block(model.head, cfg.codec, cond, make_schedule(1, ScheduleKind::kUniform, w), rng);
    const auto a0 = guided_prediction(model.head, initial(604), 1.0, cond, w);
    if (!(block.codes == sign_project(a0))) broken.push_back("K=1 w=" + fmt("%g", w));
  }

  // w = 1 against a hand-written conditional-only Euler loop
  {
    const std::size_t K = 6;
    Rng rng(605);
    const auto block = generate_block(model.head, cfg.codec, cond, make_schedule(K), rng);
    auto a = initial(605);
    for (std::size_t k = K; k >= 1; --k) {
      const double tk = static_cast<double>(k) / K, tkm1 = static_cast<double>(k - 1) / K;
      const std::vector<double> t = {tk};
      const auto pred = model.head.denoise(a, t, cond);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = (tkm1 / tk) * a[i] + (1 - tkm1 / tk) * pred[i];
    }
    if (!(block.codes == sign_project(a))) broken.push_back("w=1 unguided");
  }

  std::size_t off_cube = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(700 + s);
    const auto block = generate_block(model.head, cfg.codec, cond,
                                      make_schedule(1 + s % 5, ScheduleKind::kCosine, 0.5 * s), rng);
    for (double v : block.codes.data()) off_cube += (v == 1.0 || v == -1.0) ? 0 : 1;
  }
  if (off_cube != 0) broken.push_back("hypercube");

  std::string detail = broken.empty() ? "endpoints, K=1, w=1, hypercube hold" : "broken:";
  for (const auto& b : broken) detail += " " + b;
  return {broken.empty(), detail};
}

double eval_loss(const fs::path& ckpt_path, const RunConfig& rc,
                 const std::vector<std::string>& lines, std::uint64_t seed) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const TokenizedCorpus corpus = tokenize_corpus(rc.tokenizer, lines);
  const ModelConfig mc = model_config_for(rc, corpus.tokenizer);
  const auto packs = pack_corpus(corpus.samples, mc.codec, static_cast<std::size_t>(rc.train.pack_length)).packs;
  Trainer<float> tr(load_model<float>(ckpt), rc.train);
  return static_cast<double>(tr.evaluate(PackedBatch{packs}, seed));
}

Verdict trainability(const json& expected, const fs::path& work) {
  const json& sm = expected.at("smoke");
  const RunConfig smoke = load_run_config(kRoot / sm.at("config").get<std::string>());
  const auto smoke_lines = read_corpus(kRoot / sm.at("corpus").get<std::string>());
  const auto steps = sm.at("max_steps").get<std::int64_t>();
  const std::clock_t c0 = std::clock();
  const TrainSummary s = run_training(smoke, smoke_lines, {work / "smoke", {}, steps, {}});
  const double cpu = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
  const ModelConfig mc = load_checkpoint(s.last_checkpoint).model_config();
  const double loss = eval_loss(s.last_checkpoint, smoke, smoke_lines, sm.at("eval_seed"));
  const double bar = sm.at("loss_fraction_of_code_length").get<double>() * mc.codec.code_length;
  const bool smoke_ok = s.steps_done <= steps && loss < bar && cpu < sm.at("max_cpu_seconds").get<double>();

  const json& an = expected.at("anbn");
  const RunConfig arc = load_run_config(kRoot / an.at("config").get<std::string>());
  const auto anbn_lines = read_corpus(kRoot / an.at("corpus").get<std::string>());
  const auto a0 = Clock::now();
  const TrainSummary as = run_training(arc, anbn_lines, {work / "anbn", {}, -1, {}});
  const double anbn_secs = seconds_since(a0);
  const InferenceBundle bundle = load_for_inference(as.last_checkpoint);
  const auto schedule = make_schedule(an.at("steps").get<std::size_t>(), ScheduleKind::kUniform,
                                      an.at("guidance_scale").get<double>());
  const GrammarEval ev = eval_grammar(bundle.model, bundle.tokenizer, Grammar::parse("anbn"),
                                      an.at("samples").get<std::size_t>(), an.at("seed"), schedule);
  const bool anbn_ok = bundle.model.codec.m() == 2 && ev.validity() >= an.at("min_validity").get<double>();

  return {smoke_ok && anbn_ok,
          "smoke eval loss " + fmt("%.4f", loss) + " < " + fmt("%.2f", bar) + " after " +
              std::to_string(s.steps_done) + " steps, " + fmt("%.1f s CPU", cpu) +
              "; anbn validity " + fmt("%.2f", ev.validity()) + " (" + std::to_string(ev.valid) +
              "/" + std::to_string(ev.samples) + ", trained in " + fmt("%.1f s", anbn_secs) + ")"};
}

Verdict parallelism_law() {
  const std::size_t T = 64, K = 15;
  std::vector<Model<float>> models;
  for (int m : {1, 2, 4, 8}) models.push_back(Model<float>::create(fixture::tiny(m, 16, 16, 2), 800 + m));
  std::vector<const Model<float>*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const auto rows = throughput_report<float>(ptrs, {}, T, make_schedule(K, ScheduleKind::kUniform, 9.0), 801);
  bool ok = true;
  std::string detail;
  for (const auto& r : rows) {
    const std::size_t blocks = (T + r.block_size - 1) / r.block_size;
    ok = ok && r.tokens == T && r.stats.backbone_calls == blocks && r.stats.head_calls == K * blocks;
    detail += "m=" + std::to_string(r.block_size) + ":" + std::to_string(r.stats.backbone_calls) +
              "/" + std::to_string(r.stats.head_calls) + " ";
  }
  return {ok, detail + "(backbone/head calls)"};
}

std::vector<json> stream(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    json j = json::parse(line);
    j.erase("wall_clock");
    out.push_back(std::move(j));
  }
  return out;
}

Verdict determinism(const json& expected, const fs::path& work) {
  const json& sm = expected.at("smoke");
  const RunConfig rc = load_run_config(kRoot / sm.at("config").get<std::string>());
  const auto lines = read_corpus(kRoot / sm.at("corpus").get<std::string>());
  const std::int64_t n = 40;
  run_training(rc, lines, {work / "det_a", {}, n, {}});
  run_training(rc, lines, {work / "det_b", {}, n, {}});
  const bool same_stream = stream(work / "det_a/metrics.jsonl") == stream(work / "det_b/metrics.jsonl");

  run_training(rc, lines, {work / "det_c", {}, n / 2, {}});
  run_training(rc, lines, {work / "det_c", work / "det_c/latest.ckpt", n, {}});
  const bool same_resume = stream(work / "det_a/metrics.jsonl") == stream(work / "det_c/metrics.jsonl");
  const Checkpoint a = load_checkpoint(work / "det_a/latest.ckpt");
  const Checkpoint c = load_checkpoint(work / "det_c/latest.ckpt");
  bool same_weights = a.tensors.size() == c.tensors.size() && a.meta.at("rng_state") == c.meta.at("rng_state");
  for (std::size_t i = 0; same_weights && i < a.tensors.size(); ++i) {
    same_weights = a.tensors[i].name == c.tensors[i].name && a.tensors[i].bytes == c.tensors[i].bytes;
  }
  return {same_stream && same_resume && same_weights,
          std::string("rerun ") + (same_stream ? "identical" : "differs") + ", resume stream " +
              (same_resume ? "identical" : "differs") + ", final state " +
              (same_weights ? "identical" : "differs") + " (" + std::to_string(n) + " steps)"};
}

Verdict hyperparameters() {
  const RunConfig file = load_run_config(kRoot / "config/published_defaults.json");
  const RunConfig defaults;
  std::vector<std::string> off;
  for (const RunConfig* rc : {&file, &defaults}) {
    const std::string who = rc == &file ? "file:" : "defaults:";
    if (rc->block_size != 4) off.push_back(who + "m");
    if (rc->sampler.steps != 15) off.push_back(who + "K");
    if (rc->sampler.guidance_scale != 9.0) off.push_back(who + "w");
    if (rc->train.lr != 1e-4) off.push_back(who + "lr");
    if (rc->train.beta1 != 0.9) off.push_back(who + "beta1");
    if (rc->train.beta2 != 0.95) off.push_back(who + "beta2");
  }
  std::string detail = off.empty() ? "m=4 K=15 w=9.0 AdamW(1e-4, 0.9, 0.95)" : "mismatch:";
  for (const auto& o : off) detail += " " + o;
  return {off.empty(), detail};
}

}  // namespace

int main() {
  std::ifstream in(kRoot / "config/expected_results.json");
  const json expected = json::parse(in);
  const json& tol = expected.at("tolerances");
  fixture::TempDir work;

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"codec_roundtrip", codec_roundtrip},
      {"mask_oracle", mask_oracle},
      {"m1_reduction", [&] { return m1_reduction(tol.at("m1_reduction_fp64")); }},
      {"kv_cache_equivalence", [&] { return kv_equivalence(tol.at("kv_fp64"), tol.at("kv_fp32")); }},
      {"gradient_suite", [&] { return gradient_suite(tol.at("gradient_rel_err")); }},
      {"joint_realization", joint_realization},
      {"sampler_identities", sampler_identities},
      {"trainability", [&] { return trainability(expected, work.path()); }},
      {"parallelism_law", parallelism_law},
      {"determinism_persistence", [&] { return determinism(expected, work.path()); }},
      {"hyperparameter_fidelity", hyperparameters},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += v.pass ? 0 : 1;
    std::printf("%s %2zu %-24s %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
