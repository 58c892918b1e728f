#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "bitlm/graph.hpp"
#include "bitlm/rng.hpp"

namespace bitlm {

struct HeadConfig {
  int head_hidden = 64;
  int head_layers = 2;
  int head_heads = 2;
  int block_size = 4;
  int code_length = 8;
  int cond_size = 64;
  int time_embed_dim = 64;
  /// Intra-block attention across positions. Disabling it factorizes the
  /// head over positions (ablation only).
  bool mix_positions = true;

  void validate() const;
  std::size_t dh() const { return static_cast<std::size_t>(head_hidden); }
  std::size_t m() const { return static_cast<std::size_t>(block_size); }
  std::size_t bits() const { return static_cast<std::size_t>(code_length); }
  std::size_t d() const { return static_cast<std::size_t>(cond_size); }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

/// A_t with its timestep.
template <typename T>
struct NoisyBlock {
  Tensor<T> values;
  T t{0};
};

/// (1 - t) * clean + t * noise. t must lie in [0, 1].
template <typename T>
NoisyBlock<T> forward_noise(const Tensor<T>& clean, T t, const Tensor<T>& noise);

/// Fixed sinusoidal features of t: `dim / 2` sines then `dim / 2` cosines of
/// 1000 * t at geometrically spaced frequencies.
template <typename T>
Tensor<T> sinusoidal_features(T t, std::size_t dim);

/// Squared error summed over bits and averaged over valid positions. Zero
/// when no position is valid.
template <typename T>
T diffusion_loss(const Tensor<T>& pred, const Tensor<T>& clean,
                 std::span<const std::uint8_t> valid);

/// Per-row weights that turn ops::weighted_squared_error into diffusion_loss.
template <typename T>
std::vector<T> diffusion_loss_weights(std::span<const std::uint8_t> valid);

/// x0-predicting denoiser over m x B analog-bit blocks. Stacks of G blocks
/// are processed at once: inputs are (G*m) x B with one timestep per block
/// and a (G*m) x d condition whose row i conditions head position i.
///
/// Each residual unit is AdaLN -> intra-block self-attention followed by
/// AdaLN -> MLP. The AdaLN modulation and the output projection start at
/// zero, so an untrained head predicts the all-zero block.
template <typename T>
class DiffusionHead {
 public:
  /// Modulation weights producing [gamma - 1, beta] from the condition signal.
  struct AdaLN {
    Parameter<T> w, b;
  };

  explicit DiffusionHead(HeadConfig cfg);

  const HeadConfig& config() const { return cfg_; }

  void init(Rng& rng);

  template <typename F>
  void for_each_parameter(F&& fn) const {
    for (const Parameter<T>* p : params()) fn(*p);
  }

  template <typename F>
  void for_each_parameter(F&& fn) {
    for (const Parameter<T>* p : params()) fn(const_cast<Parameter<T>&>(*p));
  }

  /// Learned m x d block standing in for C^(n-1) on the unconditional branch.
  const Parameter<T>& null_condition() const { return null_cond_; }

  /// Timestep embeddings, one row of width d per entry of `t`.
  Value<T> time_embed(Graph<T>& g, std::span<const T> t) const;

  /// gamma(s) * LN(h) + beta(s) with gamma = 1 + s W_gamma, beta = s W_beta.
  Value<T> adaln_modulate(Graph<T>& g, Value<T> h, Value<T> signal, const AdaLN& ada) const;

  /// x0 prediction for a stack of noisy blocks.
  Value<T> forward(Graph<T>& g, Value<T> noisy, std::span<const T> t, Value<T> cond) const;

  /// Inference wrapper around forward().
  Tensor<T> denoise(const Tensor<T>& noisy, std::span<const T> t, const Tensor<T>& cond) const;

  /// Single-block convenience overload.
  Tensor<T> denoise(const NoisyBlock<T>& noisy, const Tensor<T>& cond) const;

 private:
  struct Unit {
    AdaLN ada_attn;
    Parameter<T> wq, wk, wv, wo;
    AdaLN ada_mlp;
    Parameter<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  std::vector<const Parameter<T>*> params() const;

  HeadConfig cfg_;
  Parameter<T> in_w_, in_b_, pos_;
  Parameter<T> time_w1_, time_b1_, time_w2_, time_b2_;
  Parameter<T> null_cond_;
  std::vector<Unit> units_;
  AdaLN final_ada_;
  Parameter<T> out_w_, out_b_;
};

extern template class DiffusionHead<float>;
extern template class DiffusionHead<double>;

}  // namespace bitlm
