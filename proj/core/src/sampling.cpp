#include "bitlm/sampling.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "bitlm/errors.hpp"

namespace bitlm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "uniform") return ScheduleKind::kUniform;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("sampler.schedule: expected \"uniform\" or \"cosine\", got \"" + name + "\"");
}

SamplerSchedule make_schedule(std::size_t steps, ScheduleKind kind, double guidance_scale) {
  if (steps == 0) throw DomainError("make_schedule: K must be at least 1");
  SamplerSchedule s;
  s.guidance_scale = guidance_scale;
  s.grid.resize(steps + 1);
  const auto K = static_cast<double>(steps);
  for (std::size_t k = 0; k <= steps; ++k) {
    const double u = static_cast<double>(k) / K;
    s.grid[k] = kind == ScheduleKind::kUniform ? u : 1.0 - std::cos(0.5 * std::numbers::pi * u);
  }
  s.grid.front() = 0.0;
  s.grid.back() = 1.0;
  return s;
}

template <typename T>
Tensor<T> guide(const Tensor<T>& uncond, const Tensor<T>& cond, double w) {
  if (w == 1.0) return cond;
  if (!uncond.same_shape(cond)) throw DimensionError("guide: branch shapes differ");
  Tensor<T> out = cond;
  const auto u = uncond.data();
  auto o = out.data();
  const T wt = static_cast<T>(w);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = u[i] + wt * (o[i] - u[i]);
  return out;
}

template <typename T>
Tensor<T> euler_update(const Tensor<T>& state, const Tensor<T>& a0_hat, double t_k,
                       double t_km1) {
  if (!(t_k > 0.0)) throw DomainError("euler_update: t_k must be positive");
  if (!(t_km1 >= 0.0 && t_km1 < t_k)) throw DomainError("euler_update: need 0 <= t_km1 < t_k");
  if (!state.same_shape(a0_hat)) throw DimensionError("euler_update: shapes differ");
  const T r = static_cast<T>(t_km1 / t_k);
  Tensor<T> out = a0_hat;
  const auto s = state.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = r * s[i] + (T{1} - r) * o[i];
  return out;
}

template <typename T>
Tensor<T> guided_prediction(const DiffusionHead<T>& head, const Tensor<T>& state, double t,
                            const Tensor<T>& cond, double w) {
  const T tt = static_cast<T>(t);
  if (w == 1.0) {
    const T ts[1] = {tt};
    return head.denoise(state, ts, cond);
  }
  const std::size_t m = state.rows();
  const Tensor<T> states[2] = {state, state};
  const Tensor<T> conds[2] = {cond, head.null_condition().value};
  const T ts[2] = {tt, tt};
  const Tensor<T> both = head.denoise(concat_rows<T>(states), ts, concat_rows<T>(conds));
  return guide(both.slice_rows(m, m), both.slice_rows(0, m), w);
}

template <typename T>
Tensor<T> denoise_step(const DiffusionHead<T>& head, const Tensor<T>& state, double t_k,
                       double t_km1, const Tensor<T>& cond, double w) {
  if (!(t_k > 0.0)) throw DomainError("denoise_step: t_k must be positive");
  return euler_update(state, guided_prediction(head, state, t_k, cond, w), t_k, t_km1);
}

template <typename T>
RealizedBlock<T> generate_block(const DiffusionHead<T>& head, const CodecConfig& codec,
                                const Tensor<T>& cond, const SamplerSchedule& schedule,
                                Rng& rng) {
  const std::size_t m = codec.m(), B = codec.bits();
  Tensor<T> state(m, B);
  for (auto& x : state.data()) x = static_cast<T>(rng.normal());
  for (std::size_t k = schedule.steps(); k >= 1; --k) {
    state = denoise_step(head, state, schedule.grid[k], schedule.grid[k - 1], cond,
                         schedule.guidance_scale);
  }
  RealizedBlock<T> out;
  out.codes = sign_project(state);
  for (std::size_t r = 0; r < m; ++r) {
    const Decoded d = decode_bits<T>(out.codes.row(r), codec);
    out.ids.push_back(d.id);
    out.fallback_count += d.fallback ? 1 : 0;
  }
  return out;
}

template <typename T>
GenerationSession<T>::GenerationSession(const Model<T>& model, SamplerSchedule schedule,
                                        std::uint64_t seed)
    : model_(&model), schedule_(std::move(schedule)), rng_(seed) {
  if (schedule_.steps() == 0) throw DomainError("GenerationSession: empty schedule");
}

template <typename T>
void GenerationSession<T>::prefill(std::span<const TokenId> prompt) {
  const auto start = Clock::now();
  const CodecConfig& codec = model_->codec;
  const BlockSequence seq = encode_prompt(prompt, codec);
  const auto max_len = static_cast<std::size_t>(model_->backbone.config().max_seq_len);
  if (seq.length() > max_len) {
    throw LengthError("prompt encodes to " + std::to_string(seq.length()) +
                      " positions, max_seq_len is " + std::to_string(max_len));
  }
  auto full = model_->backbone.forward_full(seq.codes<T>(codec));
  cache_ = std::move(full.cache);
  const std::size_t m = codec.m();
  cond_ = full.contexts.slice_rows(full.contexts.rows() - m, m);
  prefilled_ = true;
  stats_.prefill_seconds += seconds_since(start);
}

template <typename T>
RealizedBlock<T> GenerationSession<T>::step() {
  if (!prefilled_) throw std::logic_error("GenerationSession::step before prefill");
  const auto start = Clock::now();
  RealizedBlock<T> block = generate_block(model_->head, model_->codec, cond_, schedule_, rng_);
  stats_.head_calls += schedule_.steps();
  cond_ = model_->backbone.forward_block(block.codes, cache_);
  stats_.backbone_calls += 1;
  stats_.blocks += 1;
  stats_.fallback_count += block.fallback_count;
  stats_.decode_seconds += seconds_since(start);
  return block;
}

template <typename T>
GenerationResult generate(const Model<T>& model, std::span<const TokenId> prompt,
                          const SamplerSchedule& schedule, const GenerateOptions& options) {
  GenerationResult result;
  if (options.max_tokens == 0) return result;
  GenerationSession<T> session(model, schedule, options.seed);
  session.prefill(prompt);
  const std::size_t m = model.codec.m();
  const std::size_t max_blocks = (options.max_tokens + m - 1) / m;
  const std::size_t max_len = static_cast<std::size_t>(model.backbone.config().max_seq_len);
  for (std::size_t n = 0; n < max_blocks; ++n) {
    if (session.cache().cached_len + m > max_len) break;
    const RealizedBlock<T> block = session.step();
    for (TokenId id : block.ids) {
      if (result.tokens.size() >= options.max_tokens) break;
      result.tokens.push_back(id);
      if (options.stop_at_eos && id == model.codec.eos_id) {
        result.eos_seen = true;
        break;
      }
    }
    if (result.eos_seen) break;
  }
  result.stats = session.stats();
  return result;
}

double ThroughputRow::tokens_per_second() const {
  return stats.decode_seconds > 0 ? static_cast<double>(tokens) / stats.decode_seconds : 0.0;
}

template <typename T>
std::vector<ThroughputRow> throughput_report(std::span<const Model<T>* const> models,
                                             std::span<const TokenId> prompt,
                                             std::size_t tokens, const SamplerSchedule& schedule,
                                             std::uint64_t seed) {
  std::vector<ThroughputRow> rows;
  GenerateOptions opts;
  opts.max_tokens = tokens;
  opts.stop_at_eos = false;
  opts.seed = seed;
  for (const Model<T>* model : models) {
    const GenerationResult r = generate(*model, prompt, schedule, opts);
    rows.push_back({model->codec.m(), r.tokens.size(), schedule.steps(), r.stats});
  }
  return rows;
}

#define BITLM_SAMPLING(T)                                                                     \
  template Tensor<T> guide<T>(const Tensor<T>&, const Tensor<T>&, double);                    \
  template Tensor<T> euler_update<T>(const Tensor<T>&, const Tensor<T>&, double, double);     \
  template Tensor<T> guided_prediction<T>(const DiffusionHead<T>&, const Tensor<T>&, double,  \
                                          const Tensor<T>&, double);                          \
  template Tensor<T> denoise_step<T>(const DiffusionHead<T>&, const Tensor<T>&, double,       \
                                     double, const Tensor<T>&, double);                       \
  template RealizedBlock<T> generate_block<T>(const DiffusionHead<T>&, const CodecConfig&,    \
                                              const Tensor<T>&, const SamplerSchedule&,       \
                                              Rng&);                                          \
  template class GenerationSession<T>;                                                        \
  template GenerationResult generate<T>(const Model<T>&, std::span<const TokenId>,            \
                                        const SamplerSchedule&, const GenerateOptions&);      \
  template std::vector<ThroughputRow> throughput_report<T>(                                   \
      std::span<const Model<T>* const>, std::span<const TokenId>, std::size_t,                \
      const SamplerSchedule&, std::uint64_t);

BITLM_SAMPLING(float)
BITLM_SAMPLING(double)

#undef BITLM_SAMPLING

}  // namespace bitlm
