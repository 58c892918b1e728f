#include "bitlm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bitlm/errors.hpp"
#include "bitlm/ops.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/training.hpp"

namespace bitlm {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

PropertyResult below(std::string name, double measured, double threshold, std::string detail) {
  return {std::move(name), measured < threshold, measured, threshold, std::move(detail)};
}

ModelConfig tiny_config(int block_size, std::int64_t vocab, int hidden, int layers) {
  ModelConfig c;
  c.codec = CodecConfig::make(vocab, block_size, static_cast<TokenId>(vocab - 2),
                              static_cast<TokenId>(vocab - 1));
  c.backbone.hidden_size = hidden;
  c.backbone.num_layers = layers;
  c.backbone.num_heads = 2;
  c.backbone.mlp_ratio = 2;
  c.backbone.max_seq_len = 256;
  c.head.head_hidden = hidden;
  c.head.head_layers = layers;
  c.head.head_heads = 2;
  c.head.time_embed_dim = hidden;
  c.reconcile();
  c.validate();
  return c;
}

template <typename T>
Tensor<T> random_codes(std::size_t rows, const CodecConfig& codec, Rng& rng) {
  std::vector<TokenId> ids(rows);
  for (auto& id : ids) id = static_cast<TokenId>(rng.next_u64() % codec.vocab_size);
  return encode_tokens<T>(ids, codec);
}

template <typename T>
Tensor<T> random_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<T> t(rows, cols);
  for (auto& x : t.data()) x = static_cast<T>(rng.normal());
  return t;
}

bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

nlohmann::json PropertyResult::to_json() const {
  return {{"property", name},
          {"passed", passed},
          {"measured", measured},
          {"threshold", threshold},
          {"detail", detail}};
}

template <typename T>
void randomize_parameters(Model<T>& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  model.for_each_parameter([&](Parameter<T>& p) {
    for (auto& x : p.value.data()) x = static_cast<T>(scale * rng.normal());
  });
}

PropertyResult verify_codec_roundtrip(std::int64_t vocab_size) {
  const CodecConfig cfg = CodecConfig::make(vocab_size, 4, 0, static_cast<TokenId>(vocab_size - 1));
  std::size_t mismatches = 0;
  for (std::int64_t id = 0; id < vocab_size; ++id) {
    mismatches += decode_code(encode_token(static_cast<TokenId>(id), cfg), cfg) != id ? 1 : 0;
  }
  // every unassigned pattern must land on the fallback
  const std::size_t B = cfg.bits();
  std::vector<std::int8_t> bits(B);
  for (std::uint64_t pattern = static_cast<std::uint64_t>(vocab_size);
       pattern < (std::uint64_t{1} << B); ++pattern) {
    for (std::size_t k = 0; k < B; ++k) bits[k] = (pattern >> (B - 1 - k)) & 1 ? 1 : -1;
    const Decoded d = decode_bits<std::int8_t>(bits, cfg);
    mismatches += (d.id != cfg.fallback_id || !d.fallback) ? 1 : 0;
  }
  return {"codec_roundtrip", mismatches == 0, static_cast<double>(mismatches), 0,
          "V=" + std::to_string(vocab_size) + ", B=" + std::to_string(B) + ", " +
              std::to_string(mismatches) + " mismatches"};
}

PropertyResult verify_mask_oracle(bool inject_fault) {
  std::size_t wrong = 0, checked = 0;
  for (std::size_t m = 1; m <= 4; ++m) {
    for (std::size_t L = 1; L <= 12; ++L) {
      Tensor<double> mask = build_mask<double>(L, m);
      if (inject_fault && m == 2 && L == 6) mask(1, 2) = 0.0;
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          const bool visible = j / m <= i / m;
          const bool ok = visible ? mask(i, j) == 0.0 : mask(i, j) == ops::kMaskedOut;
          const bool causal_ok = m != 1 || (mask(i, j) == 0.0) == (j <= i);
          wrong += (ok && causal_ok) ? 0 : 1;
          ++checked;
        }
      }
    }
  }
  return {"mask_oracle", wrong == 0, static_cast<double>(wrong), 0,
          std::to_string(checked) + " entries, " + std::to_string(wrong) + " wrong" +
              (inject_fault ? " (fault injected)" : "")};
}

PropertyResult verify_m1_reduction(const Model<double>& model, std::size_t length,
                                   std::uint64_t seed) {
  // Same weights with m = 1.
  BackboneConfig cfg = model.backbone.config();
  cfg.block_size = 1;
  Backbone<double> bb(cfg, model.backbone.code_length());
  std::vector<const Parameter<double>*> src;
  model.backbone.for_each_parameter([&](const Parameter<double>& p) { src.push_back(&p); });
  std::size_t k = 0;
  bb.for_each_parameter([&](Parameter<double>& p) { p.value = src[k++]->value; });

  Rng rng(seed);
  const Tensor<double> codes = random_codes<double>(length, model.codec, rng);
  const Tensor<double> contexts = bb.forward_full(codes).contexts;
  // Oracle: left-to-right decoding, one token per step, where every new
  // token attends to the cached prefix and itself with no mask at all.
  KVCache<double> cache;
  double err = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const Tensor<double> out = bb.forward_block(codes.slice_rows(i, 1), cache);
    for (std::size_t c = 0; c < out.cols(); ++c) {
      err = std::max(err, std::abs(out(0, c) - contexts(i, c)));
    }
  }
  return below("m1_reduction", err, 1e-10,
               "L=" + std::to_string(length) + ", max abs err " + fmt(err));
}

template <typename T>
PropertyResult verify_kv_equivalence(const Model<T>& model, std::size_t blocks,
                                     std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  const std::size_t m = model.codec.m();
  const Tensor<T> codes = random_codes<T>(blocks * m, model.codec, rng);
  const Tensor<T> full = model.backbone.forward_full(codes).contexts;
  KVCache<T> cache;
  double err = 0;
  for (std::size_t b = 0; b < blocks; ++b) {
    const Tensor<T> part = model.backbone.forward_block(codes.slice_rows(b * m, m), cache);
    err = std::max(err, static_cast<double>(max_abs_diff(part, full.slice_rows(b * m, m))));
  }
  return below(std::string("kv_equivalence_") + (sizeof(T) == 8 ? "fp64" : "fp32"), err,
               tolerance,
               std::to_string(blocks) + " blocks of " + std::to_string(m) + ", max abs err " +
                   fmt(err));
}

PropertyResult verify_gradients(std::uint64_t seed) {
  Model<double> model(tiny_config(2, 8, 8, 1));
  randomize_parameters(model, seed, 0.5);
  TrainConfig tc;
  tc.seed = seed;
  Trainer<double> trainer(std::move(model), tc);

  const std::vector<std::vector<TokenId>> samples = {{1, 2, 3}, {4, 5}};
  PackingResult packed = pack_corpus(samples, trainer.model().codec, 12);
  PackedBatch batch{packed.packs};
  const auto targets = block_targets(batch, trainer.model().codec.m());
  auto draws = trainer.draw(targets);
  // one unconditional target so the null condition receives gradient
  draws.front().drop_condition = true;
  for (std::size_t i = 1; i < draws.size(); ++i) draws[i].drop_condition = false;

  trainer.compute_loss(batch, targets, draws, true);
  constexpr double h = 1e-6;
  double worst = 0;
  std::string worst_name;
  std::size_t groups = 0;
  for (Parameter<double>* p : trainer.model().parameters()) {
    const Tensor<double> analytic = p->grad;
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = trainer.compute_loss(batch, targets, draws, false);
      p->value[i] = saved - h;
      const double down = trainer.compute_loss(batch, targets, draws, false);
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    const double rel = scale < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / scale;
    ++groups;
    if (rel >= worst) {
      worst = rel;
      worst_name = p->name;
    }
  }
  return below("gradients_fp64", worst, 1e-4,
               std::to_string(groups) + " parameter groups, worst " + worst_name + " rel err " +
                   fmt(worst));
}

namespace {

// Largest change in any other position's output when one input entry moves.
double cross_position_response(const DiffusionHead<double>& head, const Tensor<double>& noisy,
                               double t, const Tensor<double>& cond) {
  const double ts[1] = {t};
  const Tensor<double> base = head.denoise(noisy, ts, cond);
  double worst = 0;
  for (std::size_t j = 0; j < noisy.rows(); ++j) {
    for (std::size_t c = 0; c < noisy.cols(); ++c) {
      Tensor<double> moved = noisy;
      moved(j, c) += 1e-3;
      const Tensor<double> out = head.denoise(moved, ts, cond);
      for (std::size_t i = 0; i < noisy.rows(); ++i) {
        if (i == j) continue;
        for (std::size_t k = 0; k < out.cols(); ++k) {
          worst = std::max(worst, std::abs(out(i, k) - base(i, k)));
        }
      }
    }
  }
  return worst;
}

}  // namespace

PropertyResult verify_joint_realization(const Model<double>& model, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t m = model.codec.m();
  const Tensor<double> noisy = random_tensor<double>(m, model.codec.bits(), rng);
  const Tensor<double> cond = random_tensor<double>(m, model.head.config().d(), rng);
  const double response = cross_position_response(model.head, noisy, 0.5, cond);
  if (m == 1) {
    return {"joint_realization", true, response, 0, "m=1 has no cross-position terms"};
  }
  return {"joint_realization", response > 1e-9, response, 1e-9,
          "largest cross-position response " + fmt(response) + " (must be nonzero)"};
}

PropertyResult verify_factorized_head(std::uint64_t seed) {
  ModelConfig cfg = tiny_config(4, 16, 8, 2);
  cfg.head.mix_positions = false;
  Model<double> model(cfg);
  randomize_parameters(model, seed, 0.5);
  Rng rng(seed + 1);
  const Tensor<double> noisy = random_tensor<double>(4, cfg.codec.bits(), rng);
  const Tensor<double> cond = random_tensor<double>(4, cfg.head.d(), rng);
  const double response = cross_position_response(model.head, noisy, 0.5, cond);
  return {"factorized_head_zero_jacobian", response == 0.0, response, 0,
          "ablated head cross-position response " + fmt(response) + " (must be exactly 0)"};
}

PropertyResult verify_sampler_identities(const Model<double>& model, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t m = model.codec.m(), B = model.codec.bits();
  std::vector<std::string> failures;

  const Tensor<double> clean = random_codes<double>(m, model.codec, rng);
  const Tensor<double> noise = random_tensor<double>(m, B, rng);
  if (!bitwise_equal(forward_noise(clean, 0.0, noise).values, clean)) {
    failures.push_back("forward_noise(t=0) != clean");
  }
  if (!bitwise_equal(forward_noise(clean, 1.0, noise).values, noise)) {
    failures.push_back("forward_noise(t=1) != noise");
  }

  const Tensor<double> cond = random_tensor<double>(m, model.head.config().d(), rng);
  const auto& head = model.head;

  // K = 1: the state after the only step is the guided prediction itself.
  {
    const SamplerSchedule one = make_schedule(1, ScheduleKind::kUniform, 9.0);
    Rng a(seed + 11), b(seed + 11);
    const RealizedBlock<double> got = generate_block(head, model.codec, cond, one, a);
    const Tensor<double> init = random_tensor<double>(m, B, b);
    const Tensor<double> a0 = guided_prediction(head, init, 1.0, cond, 9.0);
    if (!bitwise_equal(euler_update(init, a0, 1.0, 0.0), a0)) {
      failures.push_back("euler_update(t_km1=0) != guided prediction");
    }
    if (!bitwise_equal(got.codes, sign_project(a0))) {
      failures.push_back("K=1 block != sign(guided prediction)");
    }
  }

  // w = 1 against a plain conditional sampler.
  {
    const SamplerSchedule sched = make_schedule(5, ScheduleKind::kUniform, 1.0);
    Rng a(seed + 12), b(seed + 12);
    const RealizedBlock<double> got = generate_block(head, model.codec, cond, sched, a);
    Tensor<double> state = random_tensor<double>(m, B, b);
    for (std::size_t k = sched.steps(); k >= 1; --k) {
      const double tk[1] = {sched.grid[k]};
      const Tensor<double> a0 = head.denoise(state, tk, cond);
      state = euler_update(state, a0, sched.grid[k], sched.grid[k - 1]);
    }
    if (!bitwise_equal(got.codes, sign_project(state))) {
      failures.push_back("w=1 block != unguided block");
    }
  }

  // Hypercube postcondition over several guided blocks.
  {
    const SamplerSchedule sched = make_schedule(15, ScheduleKind::kCosine, 9.0);
    Rng a(seed + 13);
    for (int rep = 0; rep < 8; ++rep) {
      const RealizedBlock<double> got = generate_block(head, model.codec, cond, sched, a);
      for (double x : got.codes.data()) {
        if (x != 1.0 && x != -1.0) {
          failures.push_back("sampled entry off the hypercube");
          rep = 8;
          break;
        }
      }
    }
  }

  std::string detail = failures.empty() ? "all identities hold" : "";
  for (const auto& f : failures) detail += (detail.empty() ? "" : "; ") + f;
  return {"sampler_identities", failures.empty(), static_cast<double>(failures.size()), 0, detail};
}

std::vector<PropertyResult> run_verify_suite(const VerifyOptions& options,
                                             const Model<float>* model) {
  bool mask_fault = false;
  for (const auto& f : options.faults) {
    if (f == "mask") {
      mask_fault = true;
    } else {
      throw ConfigError("unknown fault \"" + f + "\" (known: mask)");
    }
  }
  const std::uint64_t seed = options.seed;
  std::vector<PropertyResult> out;
  out.push_back(verify_codec_roundtrip(4096));
  out.push_back(verify_mask_oracle(mask_fault));

  Model<double> fresh(tiny_config(4, 16, 16, 2));
  randomize_parameters(fresh, seed + 1, 0.3);
  out.push_back(verify_m1_reduction(fresh, 8, seed + 2));
  out.push_back(verify_kv_equivalence(fresh, 4, seed + 3, 1e-10));
  Model<float> fresh32 = fresh.cast<float>();
  out.push_back(verify_kv_equivalence(fresh32, 4, seed + 3, 1e-5));
  out.push_back(verify_gradients(seed + 4));
  out.push_back(verify_joint_realization(fresh, seed + 5));
  out.push_back(verify_factorized_head(seed + 6));
  out.push_back(verify_sampler_identities(fresh, seed + 7));

  if (model != nullptr) {
    const Model<double> loaded = model->cast<double>();
    auto tag = [](PropertyResult r) {
      r.name = "checkpoint." + r.name;
      return r;
    };
    out.push_back(tag(verify_codec_roundtrip(loaded.codec.vocab_size)));
    out.push_back(tag(verify_m1_reduction(loaded, 8, seed + 2)));
    out.push_back(tag(verify_kv_equivalence(loaded, 4, seed + 3, 1e-10)));
    out.push_back(tag(verify_kv_equivalence(*model, 4, seed + 3, 1e-5)));
    if (loaded.head.config().mix_positions) {
      out.push_back(tag(verify_joint_realization(loaded, seed + 5)));
    }
    out.push_back(tag(verify_sampler_identities(loaded, seed + 7)));
  }
  return out;
}

template void randomize_parameters<float>(Model<float>&, std::uint64_t, double);
template void randomize_parameters<double>(Model<double>&, std::uint64_t, double);
template PropertyResult verify_kv_equivalence<float>(const Model<float>&, std::size_t,
                                                     std::uint64_t, double);
template PropertyResult verify_kv_equivalence<double>(const Model<double>&, std::size_t,
                                                      std::uint64_t, double);

}  // namespace bitlm
