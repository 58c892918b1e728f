#include "bitlm/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace bitlm {

using nlohmann::json;

namespace {

/// Reads fields of one JSON object, remembering which keys were consumed so
/// leftovers can be reported as unknown.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  const json* section(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

}  // namespace

json to_json(const CodecConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"code_length", c.code_length},
          {"block_size", c.block_size}, {"bos_id", c.bos_id},
          {"eos_id", c.eos_id},         {"fallback_id", c.fallback_id},
          {"bit_order", "msb_first"}};
}

json to_json(const BackboneConfig& c) {
  return {{"hidden_size", c.hidden_size}, {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
          {"block_size", c.block_size},   {"max_seq_len", c.max_seq_len},
          {"rope_base", c.rope_base}};
}

json to_json(const HeadConfig& c) {
  return {{"head_hidden", c.head_hidden},     {"head_layers", c.head_layers},
          {"head_heads", c.head_heads},       {"block_size", c.block_size},
          {"code_length", c.code_length},     {"cond_size", c.cond_size},
          {"time_embed_dim", c.time_embed_dim}, {"mix_positions", c.mix_positions}};
}

json to_json(const ModelConfig& c) {
  return {{"codec", to_json(c.codec)}, {"backbone", to_json(c.backbone)},
          {"head", to_json(c.head)}};
}

json to_json(const RunConfig& c) {
  json backbone = to_json(c.backbone);
  backbone.erase("block_size");
  json head = {{"hidden", c.head.head_hidden},
               {"layers", c.head.head_layers},
               {"heads", c.head.head_heads},
               {"time_embed_dim", c.head.time_embed_dim},
               {"mix_positions", c.head.mix_positions}};
  const TrainConfig& t = c.train;
  return {
      {"codec",
       {{"block_size", c.block_size}, {"code_length", c.code_length},
        {"fallback_id", c.fallback_id}}},
      {"tokenizer", {{"mode", c.tokenizer.mode}, {"grammar", c.tokenizer.grammar}}},
      {"backbone", backbone},
      {"head", head},
      {"train",
       {{"lr", t.lr}, {"beta1", t.beta1}, {"beta2", t.beta2},
        {"weight_decay", t.weight_decay}, {"adam_eps", t.adam_eps},
        {"batch_size", t.batch_size}, {"pack_length", t.pack_length},
        {"total_steps", t.total_steps}, {"seed", t.seed},
        {"cond_dropout_p", t.cond_dropout_p},
        {"checkpoint_interval", t.checkpoint_interval},
        {"warmup_frac", t.warmup_frac}, {"isolate_documents", t.isolate_documents},
        {"precision", t.precision}}},
      {"sampler",
       {{"steps", c.sampler.steps}, {"schedule", c.sampler.schedule},
        {"guidance_scale", c.sampler.guidance_scale}}},
  };
}

CodecConfig codec_from_json(const json& j) {
  FieldReader r(j, "codec");
  CodecConfig c;
  std::string bit_order = "msb_first";
  r.get("vocab_size", c.vocab_size);
  r.get("code_length", c.code_length);
  r.get("block_size", c.block_size);
  r.get("bos_id", c.bos_id);
  r.get("eos_id", c.eos_id);
  r.get("fallback_id", c.fallback_id);
  r.get("bit_order", bit_order);
  r.finish();
  check(bit_order == "msb_first", "codec.bit_order", "only msb_first is supported");
  c.validate();
  return c;
}

BackboneConfig backbone_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  BackboneConfig c;
  r.get("hidden_size", c.hidden_size);
  r.get("num_layers", c.num_layers);
  r.get("num_heads", c.num_heads);
  r.get("mlp_ratio", c.mlp_ratio);
  r.get("block_size", c.block_size);
  r.get("max_seq_len", c.max_seq_len);
  r.get("rope_base", c.rope_base);
  r.finish();
  return c;
}

HeadConfig head_from_json(const json& j, const std::string& path) {
  FieldReader r(j, path);
  HeadConfig c;
  r.get("head_hidden", c.head_hidden);
  r.get("head_layers", c.head_layers);
  r.get("head_heads", c.head_heads);
  r.get("block_size", c.block_size);
  r.get("code_length", c.code_length);
  r.get("cond_size", c.cond_size);
  r.get("time_embed_dim", c.time_embed_dim);
  r.get("mix_positions", c.mix_positions);
  r.finish();
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  FieldReader r(j, "model");
  const json* codec = r.section("codec");
  const json* backbone = r.section("backbone");
  const json* head = r.section("head");
  r.finish();
  if (codec == nullptr || backbone == nullptr || head == nullptr) {
    throw ConfigError("model config needs codec, backbone and head sections");
  }
  ModelConfig c{codec_from_json(*codec), backbone_from_json(*backbone),
                head_from_json(*head)};
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  FieldReader top(j, "config");
  if (const json* s = top.section("codec")) {
    FieldReader r(*s, "codec");
    r.get("block_size", c.block_size);
    r.get("code_length", c.code_length);
    r.get("fallback_id", c.fallback_id);
    r.finish();
  }
  if (const json* s = top.section("tokenizer")) {
    FieldReader r(*s, "tokenizer");
    r.get("mode", c.tokenizer.mode);
    r.get("grammar", c.tokenizer.grammar);
    r.finish();
  }
  if (const json* s = top.section("backbone")) {
    FieldReader r(*s, "backbone");
    r.get("hidden_size", c.backbone.hidden_size);
    r.get("num_layers", c.backbone.num_layers);
    r.get("num_heads", c.backbone.num_heads);
    r.get("mlp_ratio", c.backbone.mlp_ratio);
    r.get("max_seq_len", c.backbone.max_seq_len);
    r.get("rope_base", c.backbone.rope_base);
    r.finish();
  }
  if (const json* s = top.section("head")) {
    FieldReader r(*s, "head");
    r.get("hidden", c.head.head_hidden);
    r.get("layers", c.head.head_layers);
    r.get("heads", c.head.head_heads);
    r.get("time_embed_dim", c.head.time_embed_dim);
    r.get("mix_positions", c.head.mix_positions);
    r.finish();
  }
  if (const json* s = top.section("train")) {
    FieldReader r(*s, "train");
    TrainConfig& t = c.train;
    r.get("lr", t.lr);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("weight_decay", t.weight_decay);
    r.get("adam_eps", t.adam_eps);
    r.get("batch_size", t.batch_size);
    r.get("pack_length", t.pack_length);
    r.get("total_steps", t.total_steps);
    r.get("seed", t.seed);
    r.get("cond_dropout_p", t.cond_dropout_p);
    r.get("checkpoint_interval", t.checkpoint_interval);
    r.get("warmup_frac", t.warmup_frac);
    r.get("isolate_documents", t.isolate_documents);
    r.get("precision", t.precision);
    r.finish();
  }
  if (const json* s = top.section("sampler")) {
    FieldReader r(*s, "sampler");
    r.get("steps", c.sampler.steps);
    r.get("schedule", c.sampler.schedule);
    r.get("guidance_scale", c.sampler.guidance_scale);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  check(block_size >= 1, "codec.block_size", "must be >= 1");
  check(code_length >= 0 && code_length <= 62, "codec.code_length", "must be in [0, 62]");
  check(tokenizer.mode == "byte" || tokenizer.mode == "char" || tokenizer.mode == "grammar",
        "tokenizer.mode", "must be byte, char or grammar");
  check(tokenizer.grammar == "anbn" || tokenizer.grammar == "add3", "tokenizer.grammar",
        "must be anbn or add3");
  BackboneConfig b = backbone;
  b.block_size = block_size;
  b.validate();
  check(head.head_hidden >= 1, "head.hidden", "must be positive");
  check(head.head_layers >= 0, "head.layers", "must be >= 0");
  check(head.head_heads >= 1 && head.head_hidden % head.head_heads == 0, "head.heads",
        "must divide head.hidden");
  check(head.time_embed_dim >= 2 && head.time_embed_dim % 2 == 0, "head.time_embed_dim",
        "must be even and >= 2");
  const TrainConfig& t = train;
  check(t.lr > 0, "train.lr", "must be positive");
  check(t.beta1 >= 0 && t.beta1 < 1, "train.beta1", "must be in [0, 1)");
  check(t.beta2 >= 0 && t.beta2 < 1, "train.beta2", "must be in [0, 1)");
  check(t.weight_decay >= 0, "train.weight_decay", "must be >= 0");
  check(t.adam_eps > 0, "train.adam_eps", "must be positive");
  check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
  check(t.pack_length >= 2 * block_size, "train.pack_length",
        "must hold at least two blocks");
  check(t.pack_length % block_size == 0, "train.pack_length",
        "must be divisible by codec.block_size");
  check(t.pack_length <= backbone.max_seq_len, "train.pack_length",
        "must not exceed backbone.max_seq_len");
  check(t.total_steps >= 0, "train.total_steps", "must be >= 0");
  check(t.cond_dropout_p >= 0 && t.cond_dropout_p <= 1, "train.cond_dropout_p",
        "must be in [0, 1]");
  check(t.checkpoint_interval >= 0, "train.checkpoint_interval", "must be >= 0");
  check(t.warmup_frac >= 0 && t.warmup_frac <= 1, "train.warmup_frac", "must be in [0, 1]");
  check(t.precision == "fp32" || t.precision == "fp64", "train.precision",
        "must be fp32 or fp64");
  check(sampler.steps >= 1, "sampler.steps", "must be >= 1");
  check(sampler.schedule == "uniform" || sampler.schedule == "cosine", "sampler.schedule",
        "must be uniform or cosine");
  check(std::isfinite(sampler.guidance_scale), "sampler.guidance_scale", "must be finite");
}

ModelConfig RunConfig::model_config(std::int64_t vocab_size, std::int32_t bos_id,
                                    std::int32_t eos_id,
                                    std::optional<std::int32_t> default_fallback) const {
  ModelConfig mc;
  mc.codec = CodecConfig::make(
      vocab_size, block_size, bos_id, eos_id,
      fallback_id >= 0 ? std::optional<TokenId>(fallback_id) : default_fallback,
      code_length > 0 ? std::optional<int>(code_length) : std::nullopt);
  mc.backbone = backbone;
  mc.head = head;
  mc.reconcile();
  mc.validate();
  return mc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace bitlm
