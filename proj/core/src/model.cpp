#include "bitlm/model.hpp"

namespace bitlm {

void ModelConfig::reconcile() {
  backbone.block_size = codec.block_size;
  head.block_size = codec.block_size;
  head.code_length = codec.code_length;
  head.cond_size = backbone.hidden_size;
}

void ModelConfig::validate() const {
  codec.validate();
  backbone.validate();
  head.validate();
  if (backbone.block_size != codec.block_size || head.block_size != codec.block_size) {
    throw ConfigError("block size differs between codec, backbone and head");
  }
  if (head.code_length != codec.code_length) {
    throw ConfigError("head code length differs from codec code length");
  }
  if (head.cond_size != backbone.hidden_size) {
    throw ConfigError("head condition width differs from backbone hidden size");
  }
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg)
    : codec(cfg.codec), backbone(cfg.backbone, cfg.codec.bits()), head(cfg.head) {
  cfg.validate();
}

template <typename T>
Model<T> Model<T>::create(ModelConfig cfg, std::uint64_t seed) {
  cfg.reconcile();
  Model model(cfg);
  Rng rng(seed);
  model.backbone.init(rng);
  model.head.init(rng);
  return model;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const Parameter<T>& p) { n += p.value.size(); });
  return n;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config());
  std::vector<const Parameter<T>*> src;
  for_each_parameter([&](const Parameter<T>& p) { src.push_back(&p); });
  std::size_t i = 0;
  out.for_each_parameter([&](Parameter<U>& p) { p.value = src[i++]->value.template cast<U>(); });
  return out;
}

template struct Model<float>;
template struct Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace bitlm
