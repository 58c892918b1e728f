#include "bitlm/backbone.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "bitlm/ops.hpp"

namespace bitlm {

void BackboneConfig::validate() const {
  if (hidden_size < 1) throw ConfigError("backbone.hidden_size must be positive");
  if (num_layers < 0) throw ConfigError("backbone.num_layers must be >= 0");
  if (num_heads < 1 || hidden_size % num_heads != 0) {
    throw ConfigError("backbone.hidden_size must be divisible by backbone.num_heads");
  }
  if ((hidden_size / num_heads) % 2 != 0) {
    throw ConfigError("backbone head dimension must be even for rotary embeddings");
  }
  if (mlp_ratio < 1) throw ConfigError("backbone.mlp_ratio must be >= 1");
  if (block_size < 1) throw ConfigError("backbone.block_size must be >= 1");
  if (max_seq_len < block_size) throw ConfigError("backbone.max_seq_len must be >= block_size");
  if (!(rope_base > 1.0)) throw ConfigError("backbone.rope_base must exceed 1");
}

std::int64_t block_index(std::int64_t i, std::int64_t m) {
  if (i < 1) throw DomainError("block_index: positions are 1-based, got " + std::to_string(i));
  if (m < 1) throw DomainError("block_index: block size must be >= 1");
  return (i - 1) / m + 1;
}

template <typename T>
Tensor<T> build_mask(std::size_t length, std::size_t block_size) {
  Tensor<T> mask(length, length);
  const auto m = static_cast<std::int64_t>(block_size);
  for (std::size_t i = 0; i < length; ++i) {
    const std::int64_t bi = block_index(static_cast<std::int64_t>(i) + 1, m);
    for (std::size_t j = 0; j < length; ++j) {
      const std::int64_t bj = block_index(static_cast<std::int64_t>(j) + 1, m);
      mask(i, j) = bj <= bi ? T{0} : static_cast<T>(ops::kMaskedOut);
    }
  }
  return mask;
}

template <typename T>
Tensor<T> build_document_mask(std::size_t block_size,
                              std::span<const std::int32_t> segments) {
  Tensor<T> mask = build_mask<T>(segments.size(), block_size);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    for (std::size_t j = 0; j < segments.size(); ++j) {
      if (segments[i] != segments[j]) mask(i, j) = static_cast<T>(ops::kMaskedOut);
    }
  }
  return mask;
}

namespace {

template <typename T>
Parameter<T> make_param(std::string name, std::size_t rows, std::size_t cols,
                        T fill = T{0}) {
  return Parameter<T>{std::move(name), Tensor<T>(rows, cols, fill), {}};
}

template <typename T>
void gaussian(Parameter<T>& p, Rng& rng, double stddev) {
  for (auto& x : p.value.data()) x = static_cast<T>(rng.normal() * stddev);
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(BackboneConfig cfg, std::size_t code_length)
    : cfg_(cfg), code_length_(code_length) {
  cfg_.validate();
  if (code_length_ < 1) throw ConfigError("backbone needs a positive code length");
  const std::size_t d = cfg_.d();
  const std::size_t f = d * static_cast<std::size_t>(cfg_.mlp_ratio);
  lift_w1_ = make_param<T>("backbone.lift.w1", code_length_, d);
  lift_b1_ = make_param<T>("backbone.lift.b1", 1, d);
  lift_w2_ = make_param<T>("backbone.lift.w2", d, d);
  lift_b2_ = make_param<T>("backbone.lift.b2", 1, d);
  layers_.resize(static_cast<std::size_t>(cfg_.num_layers));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "backbone.layers." + std::to_string(i) + ".";
    Layer& l = layers_[i];
    l.attn_norm = make_param<T>(p + "attn_norm", 1, d, T{1});
    l.wq = make_param<T>(p + "wq", d, d);
    l.wk = make_param<T>(p + "wk", d, d);
    l.wv = make_param<T>(p + "wv", d, d);
    l.wo = make_param<T>(p + "wo", d, d);
    l.mlp_norm = make_param<T>(p + "mlp_norm", 1, d, T{1});
    l.w_gate = make_param<T>(p + "w_gate", d, f);
    l.w_up = make_param<T>(p + "w_up", d, f);
    l.w_down = make_param<T>(p + "w_down", f, d);
  }
  final_norm_ = make_param<T>("backbone.final_norm", 1, d, T{1});
}

template <typename T>
void Backbone<T>::init(Rng& rng) {
  auto fan_in = [](const Parameter<T>& p) {
    return 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
  };
  gaussian(lift_w1_, rng, fan_in(lift_w1_));
  gaussian(lift_w2_, rng, fan_in(lift_w2_));
  for (Layer& l : layers_) {
    for (Parameter<T>* p : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) {
      gaussian(*p, rng, fan_in(*p));
    }
  }
}

template <typename T>
Value<T> Backbone<T>::lift(Graph<T>& g, Value<T> codes) const {
  if (codes.cols() != code_length_) {
    throw DimensionError("lift expects " + std::to_string(code_length_) +
                         " bits per position, got " + std::to_string(codes.cols()));
  }
  Value<T> h = ops::add_row(ops::matmul(codes, g.param(lift_w1_)), g.param(lift_b1_));
  h = ops::silu(h);
  return ops::add_row(ops::matmul(h, g.param(lift_w2_)), g.param(lift_b2_));
}

template <typename T>
Value<T> Backbone<T>::run_layers(Graph<T>& g, Value<T> x,
                                 std::span<const std::int64_t> positions,
                                 const Tensor<T>& mask, const KVCache<T>* past,
                                 KVCache<T>* out_cache) const {
  const auto heads = static_cast<std::size_t>(cfg_.num_heads);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Value<T> h = ops::mul_row(ops::layer_norm(x), g.param(l.attn_norm));
    Value<T> q = ops::rope(ops::matmul(h, g.param(l.wq)), positions, heads, cfg_.rope_base);
    Value<T> k = ops::rope(ops::matmul(h, g.param(l.wk)), positions, heads, cfg_.rope_base);
    Value<T> v = ops::matmul(h, g.param(l.wv));
    Value<T> k_all = k;
    Value<T> v_all = v;
    if (past != nullptr && past->cached_len > 0) {
      k_all = ops::concat_rows<T>({g.constant(past->keys[li]), k});
      v_all = ops::concat_rows<T>({g.constant(past->values[li]), v});
    }
    if (out_cache != nullptr) {
      out_cache->keys[li] = k_all.value();
      out_cache->values[li] = v_all.value();
    }
    Value<T> attn = ops::masked_attention(q, k_all, v_all, mask, heads);
    x = ops::add(x, ops::matmul(attn, g.param(l.wo)));

    Value<T> h2 = ops::mul_row(ops::layer_norm(x), g.param(l.mlp_norm));
    Value<T> gate = ops::silu(ops::matmul(h2, g.param(l.w_gate)));
    Value<T> up = ops::matmul(h2, g.param(l.w_up));
    x = ops::add(x, ops::matmul(ops::mul(gate, up), g.param(l.w_down)));
  }
  // A zero-layer stack is the identity over lifted inputs.
  if (layers_.empty()) return x;
  return ops::mul_row(ops::layer_norm(x), g.param(final_norm_));
}

template <typename T>
Value<T> Backbone<T>::forward(Graph<T>& g, Value<T> codes,
                              std::span<const std::int64_t> positions,
                              const Tensor<T>& mask, KVCache<T>* cache) const {
  const std::size_t L = codes.rows();
  if (L > static_cast<std::size_t>(cfg_.max_seq_len)) {
    throw LengthError("sequence of " + std::to_string(L) + " positions exceeds max_seq_len " +
                      std::to_string(cfg_.max_seq_len));
  }
  if (positions.size() != L) throw DimensionError("one position per row required");
  if (cache != nullptr) {
    cache->keys.assign(layers_.size(), {});
    cache->values.assign(layers_.size(), {});
    cache->cached_len = L;
    cache->block_size = cfg_.m();
  }
  return run_layers(g, lift(g, codes), positions, mask, nullptr, cache);
}

template <typename T>
Value<T> Backbone<T>::forward_packed(Graph<T>& g, Value<T> codes,
                                     std::span<const std::int32_t> segments,
                                     bool isolate_documents) const {
  const std::size_t L = codes.rows();
  if (segments.size() != L) throw DimensionError("one segment id per row required");
  if (L % cfg_.m() != 0) {
    throw AlignmentError("packed length " + std::to_string(L) +
                         " is not a multiple of the block size");
  }
  std::vector<std::int64_t> positions(L);
  if (isolate_documents) {
    std::size_t start = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (i == 0 || segments[i] != segments[i - 1]) start = i;
      positions[i] = static_cast<std::int64_t>(i - start);
    }
    return forward(g, codes, positions, build_document_mask<T>(cfg_.m(), segments));
  }
  std::iota(positions.begin(), positions.end(), std::int64_t{0});
  return forward(g, codes, positions, build_mask<T>(L, cfg_.m()));
}

template <typename T>
typename Backbone<T>::FullResult Backbone<T>::forward_full(const Tensor<T>& codes) const {
  const std::size_t L = codes.rows();
  if (L % cfg_.m() != 0) {
    throw AlignmentError("sequence length " + std::to_string(L) +
                         " is not a multiple of the block size " + std::to_string(cfg_.m()));
  }
  Graph<T> g(Graph<T>::Mode::kInference);
  std::vector<std::int64_t> positions(L);
  std::iota(positions.begin(), positions.end(), std::int64_t{0});
  FullResult result;
  Value<T> out = forward(g, g.constant(codes), positions, build_mask<T>(L, cfg_.m()),
                         &result.cache);
  result.contexts = out.value();
  return result;
}

template <typename T>
Tensor<T> Backbone<T>::forward_block(const Tensor<T>& new_codes, KVCache<T>& cache) const {
  const std::size_t m = cfg_.m();
  if (new_codes.rows() != m) {
    throw DimensionError("forward_block expects " + std::to_string(m) + " rows, got " +
                         std::to_string(new_codes.rows()));
  }
  if (cache.cached_len % m != 0 || (cache.cached_len > 0 && cache.block_size != m)) {
    throw CacheCorruptionError("cache length " + std::to_string(cache.cached_len) +
                               " is not aligned to block size " + std::to_string(m));
  }
  if (cache.cached_len > 0) {
    bool consistent = cache.keys.size() == layers_.size() &&
                      cache.values.size() == layers_.size();
    for (std::size_t li = 0; consistent && li < layers_.size(); ++li) {
      consistent = cache.keys[li].rows() == cache.cached_len &&
                   cache.values[li].rows() == cache.cached_len;
    }
    if (!consistent) throw CacheCorruptionError("cache tensors disagree with cached_len");
  }
  const std::size_t past = cache.cached_len;
  if (past + m > static_cast<std::size_t>(cfg_.max_seq_len)) {
    throw LengthError("cache would exceed max_seq_len");
  }

  Graph<T> g(Graph<T>::Mode::kInference);
  std::vector<std::int64_t> positions(m);
  std::iota(positions.begin(), positions.end(), static_cast<std::int64_t>(past));
  // Every cached position lies in an earlier block and the new block sees
  // itself fully, so nothing is masked.
  const Tensor<T> mask(m, past + m);

  KVCache<T> next;
  next.keys.assign(layers_.size(), {});
  next.values.assign(layers_.size(), {});
  Value<T> out = run_layers(g, lift(g, g.constant(new_codes)), positions, mask, &cache, &next);
  if (layers_.empty()) {
    next.keys = cache.keys;
    next.values = cache.values;
  }
  next.cached_len = past + m;
  next.block_size = m;
  Tensor<T> contexts = out.value();
  cache = std::move(next);
  return contexts;
}

template Tensor<float> build_mask<float>(std::size_t, std::size_t);
template Tensor<double> build_mask<double>(std::size_t, std::size_t);
template Tensor<float> build_document_mask<float>(std::size_t, std::span<const std::int32_t>);
template Tensor<double> build_document_mask<double>(std::size_t,
                                                    std::span<const std::int32_t>);
template class Backbone<float>;
template class Backbone<double>;

}  // namespace bitlm
