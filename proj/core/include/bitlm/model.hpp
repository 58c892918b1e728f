#pragma once

#include <cstdint>
#include <vector>

#include "bitlm/backbone.hpp"
#include "bitlm/codec.hpp"
#include "bitlm/diff_head.hpp"

namespace bitlm {

/// Codec, backbone and head settings for one model. `reconcile()` copies the
/// shared dimensions (m, B, d) from codec and backbone into the others.
struct ModelConfig {
  CodecConfig codec;
  BackboneConfig backbone;
  HeadConfig head;

  void reconcile();
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Model {
  CodecConfig codec;
  Backbone<T> backbone;
  DiffusionHead<T> head;

  explicit Model(const ModelConfig& cfg);

  /// Builds and randomly initializes a model.
  static Model create(ModelConfig cfg, std::uint64_t seed);

  ModelConfig config() const { return {codec, backbone.config(), head.config()}; }

  template <typename F>
  void for_each_parameter(F&& fn) const {
    backbone.for_each_parameter(fn);
    head.for_each_parameter(fn);
  }

  template <typename F>
  void for_each_parameter(F&& fn) {
    backbone.for_each_parameter(fn);
    head.for_each_parameter(fn);
  }

  std::vector<Parameter<T>*> parameters();
  std::size_t parameter_count() const;

  /// Same weights at another precision.
  template <typename U>
  Model<U> cast() const;
};

extern template struct Model<float>;
extern template struct Model<double>;

}  // namespace bitlm
