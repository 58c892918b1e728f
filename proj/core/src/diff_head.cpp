#include "bitlm/diff_head.hpp"

#include <cmath>
#include <string>

#include "bitlm/ops.hpp"

namespace bitlm {

void HeadConfig::validate() const {
  if (head_hidden < 1 || head_layers < 0 || block_size < 1 || code_length < 1 ||
      cond_size < 1 || time_embed_dim < 2) {
    throw ConfigError("head dimensions must be positive (time_embed_dim >= 2)");
  }
  if (time_embed_dim % 2 != 0) throw ConfigError("head.time_embed_dim must be even");
  if (head_heads < 1 || head_hidden % head_heads != 0) {
    throw ConfigError("head.head_hidden must be divisible by head.head_heads");
  }
}

template <typename T>
NoisyBlock<T> forward_noise(const Tensor<T>& clean, T t, const Tensor<T>& noise) {
  if (!(t >= T{0} && t <= T{1})) {
    throw DomainError("forward_noise: t must lie in [0, 1]");
  }
  if (!clean.same_shape(noise)) throw DimensionError("forward_noise: noise shape mismatch");
  NoisyBlock<T> out{Tensor<T>(clean.shape()), t};
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.values[i] = (T{1} - t) * clean[i] + t * noise[i];
  }
  return out;
}

template <typename T>
Tensor<T> sinusoidal_features(T t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out(1, dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * static_cast<double>(t) * freq;
    out(0, i) = static_cast<T>(std::sin(arg));
    out(0, half + i) = static_cast<T>(std::cos(arg));
  }
  return out;
}

template <typename T>
std::vector<T> diffusion_loss_weights(std::span<const std::uint8_t> valid) {
  std::size_t n = 0;
  for (auto v : valid) n += v != 0 ? 1 : 0;
  std::vector<T> w(valid.size(), T{0});
  if (n == 0) return w;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i] != 0) w[i] = T{1} / static_cast<T>(n);
  }
  return w;
}

template <typename T>
T diffusion_loss(const Tensor<T>& pred, const Tensor<T>& clean,
                 std::span<const std::uint8_t> valid) {
  if (!pred.same_shape(clean)) throw DimensionError("diffusion_loss: shape mismatch");
  if (valid.size() != pred.rows()) {
    throw DimensionError("diffusion_loss: one validity flag per position required");
  }
  Graph<T> g(Graph<T>::Mode::kInference);
  const std::vector<T> w = diffusion_loss_weights<T>(valid);
  return ops::weighted_squared_error<T>(g.constant(pred), clean, w).value()[0];
}

namespace {

template <typename T>
Parameter<T> make_param(std::string name, std::size_t rows, std::size_t cols) {
  return Parameter<T>{std::move(name), Tensor<T>(rows, cols), {}};
}

template <typename T>
void gaussian(Parameter<T>& p, Rng& rng, double stddev) {
  for (auto& x : p.value.data()) x = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void fan_in_init(Parameter<T>& p, Rng& rng) {
  gaussian(p, rng, 1.0 / std::sqrt(static_cast<double>(p.value.rows())));
}

template <typename T>
Value<T> linear(Graph<T>& g, Value<T> x, const Parameter<T>& w, const Parameter<T>& b) {
  return ops::add_row(ops::matmul(x, g.param(w)), g.param(b));
}

}  // namespace

template <typename T>
DiffusionHead<T>::DiffusionHead(HeadConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t dh = cfg_.dh(), d = cfg_.d(), B = cfg_.bits(), m = cfg_.m();
  const std::size_t te = static_cast<std::size_t>(cfg_.time_embed_dim);
  auto ada = [&](const std::string& name) {
    return AdaLN{make_param<T>(name + ".w", d, 2 * dh), make_param<T>(name + ".b", 1, 2 * dh)};
  };
  in_w_ = make_param<T>("head.in.w", B, dh);
  in_b_ = make_param<T>("head.in.b", 1, dh);
  pos_ = make_param<T>("head.pos", m, dh);
  time_w1_ = make_param<T>("head.time.w1", te, d);
  time_b1_ = make_param<T>("head.time.b1", 1, d);
  time_w2_ = make_param<T>("head.time.w2", d, d);
  time_b2_ = make_param<T>("head.time.b2", 1, d);
  null_cond_ = make_param<T>("head.null_cond", m, d);
  units_.resize(static_cast<std::size_t>(cfg_.head_layers));
  for (std::size_t i = 0; i < units_.size(); ++i) {
    const std::string p = "head.units." + std::to_string(i) + ".";
    Unit& u = units_[i];
    u.ada_attn = ada(p + "ada_attn");
    u.wq = make_param<T>(p + "wq", dh, dh);
    u.wk = make_param<T>(p + "wk", dh, dh);
    u.wv = make_param<T>(p + "wv", dh, dh);
    u.wo = make_param<T>(p + "wo", dh, dh);
    u.ada_mlp = ada(p + "ada_mlp");
    u.mlp_w1 = make_param<T>(p + "mlp.w1", dh, 4 * dh);
    u.mlp_b1 = make_param<T>(p + "mlp.b1", 1, 4 * dh);
    u.mlp_w2 = make_param<T>(p + "mlp.w2", 4 * dh, dh);
    u.mlp_b2 = make_param<T>(p + "mlp.b2", 1, dh);
  }
  final_ada_ = ada("head.final_ada");
  out_w_ = make_param<T>("head.out.w", dh, B);
  out_b_ = make_param<T>("head.out.b", 1, B);
}

template <typename T>
std::vector<const Parameter<T>*> DiffusionHead<T>::params() const {
  std::vector<const Parameter<T>*> out = {&in_w_,    &in_b_,    &pos_,     &time_w1_,
                                          &time_b1_, &time_w2_, &time_b2_, &null_cond_};
  for (const Unit& u : units_) {
    for (const Parameter<T>* p :
         {&u.ada_attn.w, &u.ada_attn.b, &u.wq, &u.wk, &u.wv, &u.wo, &u.ada_mlp.w,
          &u.ada_mlp.b, &u.mlp_w1, &u.mlp_b1, &u.mlp_w2, &u.mlp_b2}) {
      out.push_back(p);
    }
  }
  out.insert(out.end(), {&final_ada_.w, &final_ada_.b, &out_w_, &out_b_});
  return out;
}

template <typename T>
void DiffusionHead<T>::init(Rng& rng) {
  fan_in_init(in_w_, rng);
  gaussian(pos_, rng, 0.1);
  fan_in_init(time_w1_, rng);
  fan_in_init(time_w2_, rng);
  gaussian(null_cond_, rng, 1.0);
  for (Unit& u : units_) {
    for (Parameter<T>* p : {&u.wq, &u.wk, &u.wv, &u.wo, &u.mlp_w1, &u.mlp_w2}) {
      fan_in_init(*p, rng);
    }
  }
  // AdaLN modulation and output projection stay zero.
}

template <typename T>
Value<T> DiffusionHead<T>::time_embed(Graph<T>& g, std::span<const T> t) const {
  std::vector<Tensor<T>> rows;
  rows.reserve(t.size());
  for (T ti : t) {
    if (!(ti >= T{0} && ti <= T{1})) throw DomainError("time_embed: t must lie in [0, 1]");
    rows.push_back(sinusoidal_features(ti, static_cast<std::size_t>(cfg_.time_embed_dim)));
  }
  Value<T> feats = g.constant(concat_rows<T>(rows));
  Value<T> h = ops::silu(linear(g, feats, time_w1_, time_b1_));
  return linear(g, h, time_w2_, time_b2_);
}

template <typename T>
Value<T> DiffusionHead<T>::adaln_modulate(Graph<T>& g, Value<T> h, Value<T> signal,
                                          const AdaLN& ada) const {
  const std::size_t dh = cfg_.dh();
  if (h.cols() != dh) throw DimensionError("adaln: hidden width mismatch");
  if (signal.rows() != h.rows()) {
    throw DimensionError("adaln: condition has " + std::to_string(signal.rows()) +
                         " rows for " + std::to_string(h.rows()) + " positions");
  }
  Value<T> mod = linear(g, signal, ada.w, ada.b);
  Value<T> gamma = ops::add_scalar(ops::slice_cols(mod, 0, dh), T{1});
  Value<T> beta = ops::slice_cols(mod, dh, dh);
  return ops::add(ops::mul(gamma, ops::layer_norm(h)), beta);
}

template <typename T>
Value<T> DiffusionHead<T>::forward(Graph<T>& g, Value<T> noisy, std::span<const T> t,
                                   Value<T> cond) const {
  const std::size_t m = cfg_.m();
  const std::size_t blocks = t.size();
  if (noisy.cols() != cfg_.bits() || noisy.rows() != blocks * m) {
    throw DimensionError("head expects " + std::to_string(blocks * m) + "x" +
                         std::to_string(cfg_.bits()) + " noisy input, got " +
                         shape_str(noisy.value().shape()));
  }
  if (cond.cols() != cfg_.d() || cond.rows() != blocks * m) {
    throw DimensionError("head condition must be " + std::to_string(blocks * m) + "x" +
                         std::to_string(cfg_.d()) + ", got " +
                         shape_str(cond.value().shape()));
  }
  // Condition signal: per-position context plus the block's timestep embedding.
  Value<T> temb = ops::repeat_rows(time_embed(g, t), m);
  Value<T> signal = ops::silu(ops::add(cond, temb));

  Value<T> pos = g.param(pos_);
  Value<T> h = linear(g, noisy, in_w_, in_b_);
  h = ops::add(h, blocks == 1 ? pos : ops::concat_rows(std::vector<Value<T>>(blocks, pos)));

  const std::size_t group = cfg_.mix_positions ? m : 1;
  const auto heads = static_cast<std::size_t>(cfg_.head_heads);
  for (const Unit& u : units_) {
    Value<T> a = adaln_modulate(g, h, signal, u.ada_attn);
    Value<T> q = ops::matmul(a, g.param(u.wq));
    Value<T> k = ops::matmul(a, g.param(u.wk));
    Value<T> v = ops::matmul(a, g.param(u.wv));
    Value<T> attn = ops::grouped_attention(q, k, v, group, heads);
    h = ops::add(h, ops::matmul(attn, g.param(u.wo)));

    Value<T> b = adaln_modulate(g, h, signal, u.ada_mlp);
    Value<T> mlp = linear(g, ops::silu(linear(g, b, u.mlp_w1, u.mlp_b1)), u.mlp_w2, u.mlp_b2);
    h = ops::add(h, mlp);
  }
  Value<T> out = adaln_modulate(g, h, signal, final_ada_);
  return linear(g, out, out_w_, out_b_);
}

template <typename T>
Tensor<T> DiffusionHead<T>::denoise(const Tensor<T>& noisy, std::span<const T> t,
                                    const Tensor<T>& cond) const {
  Graph<T> g(Graph<T>::Mode::kInference);
  return forward(g, g.constant(noisy), t, g.constant(cond)).value();
}

template <typename T>
Tensor<T> DiffusionHead<T>::denoise(const NoisyBlock<T>& noisy, const Tensor<T>& cond) const {
  const T t[] = {noisy.t};
  return denoise(noisy.values, t, cond);
}

template NoisyBlock<float> forward_noise<float>(const Tensor<float>&, float,
                                                const Tensor<float>&);
template NoisyBlock<double> forward_noise<double>(const Tensor<double>&, double,
                                                  const Tensor<double>&);
template Tensor<float> sinusoidal_features<float>(float, std::size_t);
template Tensor<double> sinusoidal_features<double>(double, std::size_t);
template std::vector<float> diffusion_loss_weights<float>(std::span<const std::uint8_t>);
template std::vector<double> diffusion_loss_weights<double>(std::span<const std::uint8_t>);
template float diffusion_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                     std::span<const std::uint8_t>);
template double diffusion_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                       std::span<const std::uint8_t>);
template class DiffusionHead<float>;
template class DiffusionHead<double>;

}  // namespace bitlm
