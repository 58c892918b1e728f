#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "bitlm/graph.hpp"
#include "bitlm/rng.hpp"

namespace bitlm {

struct BackboneConfig {
  int hidden_size = 64;
  int num_layers = 2;
  int num_heads = 4;
  int mlp_ratio = 4;
  int block_size = 4;
  int max_seq_len = 4096;
  double rope_base = 10000.0;

  void validate() const;
  std::size_t d() const { return static_cast<std::size_t>(hidden_size); }
  std::size_t m() const { return static_cast<std::size_t>(block_size); }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// 1-based block number of 1-based position i: floor((i - 1) / m) + 1.
std::int64_t block_index(std::int64_t i, std::int64_t m);

/// Dense L x L additive mask: 0 where b(j) <= b(i), ops::kMaskedOut elsewhere.
template <typename T>
Tensor<T> build_mask(std::size_t length, std::size_t block_size);

/// Block-causal mask intersected with document segmentation: position i sees
/// j only when b(j) <= b(i) and both lie in the same segment.
template <typename T>
Tensor<T> build_document_mask(std::size_t block_size,
                              std::span<const std::int32_t> segments);

/// Per-layer rotated keys and values for every realized position.
template <typename T>
struct KVCache {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;
  std::size_t cached_len = 0;
  std::size_t block_size = 1;
};

/// Lifting MLP plus a stack of pre-norm transformer layers (rotary
/// positions, multi-head attention, gated MLP) under a block-causal mask.
template <typename T>
class Backbone {
 public:
  Backbone(BackboneConfig cfg, std::size_t code_length);

  const BackboneConfig& config() const { return cfg_; }
  std::size_t code_length() const { return code_length_; }

  /// Gaussian init scaled by 1/sqrt(fan_in); biases zero, norm gains one.
  void init(Rng& rng);

  template <typename F>
  void for_each_parameter(F&& fn) const {
    fn(lift_w1_);
    fn(lift_b1_);
    fn(lift_w2_);
    fn(lift_b2_);
    for (const Layer& l : layers_) {
      for (const Parameter<T>* p : l.params()) fn(*p);
    }
    fn(final_norm_);
  }

  template <typename F>
  void for_each_parameter(F&& fn) {
    std::as_const(*this).for_each_parameter(
        [&](const Parameter<T>& p) { fn(const_cast<Parameter<T>&>(p)); });
  }

  /// Position-wise two-layer MLP from B to d.
  Value<T> lift(Graph<T>& g, Value<T> codes) const;

  /// Runs the layers over `codes` (L x B). `positions` feed the rotary
  /// embedding and `mask` is L x L. When `cache` is non-null it receives the
  /// keys and values of all L positions.
  Value<T> forward(Graph<T>& g, Value<T> codes, std::span<const std::int64_t> positions,
                   const Tensor<T>& mask, KVCache<T>* cache = nullptr) const;

  /// Block-causal pass over a packed sequence. With `isolate_documents` each
  /// segment only sees itself and rotary positions restart at its first row.
  Value<T> forward_packed(Graph<T>& g, Value<T> codes,
                          std::span<const std::int32_t> segments,
                          bool isolate_documents) const;

  struct FullResult {
    Tensor<T> contexts;
    KVCache<T> cache;
  };

  /// Inference pass over an L x B code matrix, L a multiple of m.
  FullResult forward_full(const Tensor<T>& codes) const;

  /// Appends one m x B block to `cache` and returns its m x d contexts.
  Tensor<T> forward_block(const Tensor<T>& new_codes, KVCache<T>& cache) const;

 private:
  struct Layer {
    Parameter<T> attn_norm, wq, wk, wv, wo;
    Parameter<T> mlp_norm, w_gate, w_up, w_down;

    std::vector<const Parameter<T>*> params() const {
      return {&attn_norm, &wq, &wk, &wv, &wo, &mlp_norm, &w_gate, &w_up, &w_down};
    }
  };

  /// Layer stack over lifted inputs. `past` holds cached rows preceding `x`;
  /// `out_cache`, when non-null, receives past plus new rows per layer.
  Value<T> run_layers(Graph<T>& g, Value<T> x, std::span<const std::int64_t> positions,
                      const Tensor<T>& mask, const KVCache<T>* past,
                      KVCache<T>* out_cache) const;

  BackboneConfig cfg_;
  std::size_t code_length_;
  Parameter<T> lift_w1_, lift_b1_, lift_w2_, lift_b2_;
  std::vector<Layer> layers_;
  Parameter<T> final_norm_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace bitlm
