#include "bitlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace bitlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'B', 'I', 'T', 'L', 'M', 'C', 'K', 'P'};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

template <typename V>
V take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw CheckpointError("checkpoint truncated");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
Tensor<T> StoredTensor::as() const {
  const std::size_t n = shape_numel(shape);
  std::vector<T> out(n);
  if (dtype == "f32") {
    if (bytes.size() != n * 4) throw CheckpointError("tensor " + name + " has wrong size");
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      out[i] = static_cast<T>(f);
    }
  } else if (dtype == "f64") {
    if (bytes.size() != n * 8) throw CheckpointError("tensor " + name + " has wrong size");
    for (std::size_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, bytes.data() + 8 * i, 8);
      out[i] = static_cast<T>(d);
    }
  } else {
    throw CheckpointError("tensor " + name + " has unknown dtype " + dtype);
  }
  return Tensor<T>(shape, std::move(out));
}

template <typename T>
StoredTensor store_tensor(std::string name, const Tensor<T>& t) {
  StoredTensor s{std::move(name), t.shape(), dtype_name<T>(), {}};
  s.bytes.resize(t.size() * sizeof(T));
  std::memcpy(s.bytes.data(), t.data().data(), s.bytes.size());
  return s;
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

ModelConfig Checkpoint::model_config() const {
  if (!meta.contains("model")) throw CheckpointError("checkpoint has no model config");
  try {
    return model_config_from_json(meta.at("model"));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint model config invalid: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header = ckpt.meta;
  json directory = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    directory.push_back({{"name", t.name},
                         {"shape", t.shape},
                         {"dtype", t.dtype},
                         {"offset", offset},
                         {"nbytes", t.bytes.size()},
                         {"crc32", crc_of(t.bytes.data(), t.bytes.size())}});
    offset += t.bytes.size();
  }
  header["tensors"] = directory;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, ckpt.format_version);
  put<std::uint64_t>(out, text.size());
  out += text;
  put<std::uint32_t>(out, crc_of(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  for (const auto& t : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  Checkpoint ckpt;
  ckpt.format_version = take<std::uint32_t>(in, pos);
  if (ckpt.format_version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(ckpt.format_version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  const auto header_len = take<std::uint64_t>(in, pos);
  if (pos + header_len + 4 > in.size()) throw CheckpointError("checkpoint header truncated");
  const std::string text = in.substr(pos, header_len);
  pos += header_len;
  const auto header_crc = take<std::uint32_t>(in, pos);
  if (header_crc != crc_of(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())) {
    throw CheckpointError("checkpoint header checksum mismatch");
  }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t blob_base = pos;
  try {
    for (const auto& entry : header.at("tensors")) {
      StoredTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      t.dtype = entry.at("dtype").get<std::string>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (blob_base + offset + nbytes > in.size()) {
        throw CheckpointError("tensor " + t.name + " extends past end of file");
      }
      const auto* begin = reinterpret_cast<const std::uint8_t*>(in.data() + blob_base + offset);
      t.bytes.assign(begin, begin + nbytes);
      if (crc_of(t.bytes.data(), t.bytes.size()) != entry.at("crc32").get<std::uint32_t>()) {
        throw CheckpointError("checksum mismatch in tensor " + t.name);
      }
      const std::size_t width = t.dtype == "f32" ? 4 : t.dtype == "f64" ? 8 : 0;
      if (width == 0 || shape_numel(t.shape) * width != nbytes) {
        throw CheckpointError("tensor " + t.name + " has inconsistent dtype or shape");
      }
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed tensor directory: ") + e.what());
  }
  header.erase("tensors");
  ckpt.meta = std::move(header);
  return ckpt;
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model) {
  Checkpoint ckpt;
  ckpt.meta["model"] = to_json(model.config());
  ckpt.meta["dtype"] = dtype_name<T>();
  model.for_each_parameter(
      [&](const Parameter<T>& p) { ckpt.tensors.push_back(store_tensor(p.name, p.value)); });
  return ckpt;
}

template <typename T>
Checkpoint make_checkpoint(const Trainer<T>& trainer) {
  Checkpoint ckpt = make_checkpoint(trainer.model());
  ckpt.meta["step"] = trainer.step();
  ckpt.meta["rng_state"] = trainer.rng().state();
  const AdamState<T>& opt = trainer.optimizer();
  ckpt.meta["optimizer_step"] = opt.step;
  if (!opt.m.empty()) {
    std::size_t i = 0;
    trainer.model().for_each_parameter([&](const Parameter<T>& p) {
      ckpt.tensors.push_back(store_tensor("adam.m." + p.name, opt.m[i]));
      ckpt.tensors.push_back(store_tensor("adam.v." + p.name, opt.v[i]));
      ++i;
    });
  }
  return ckpt;
}

template <typename T>
void restore_model(const Checkpoint& ckpt, Model<T>& model) {
  const ModelConfig stored = ckpt.model_config();
  const ModelConfig expected = model.config();
  if (stored.codec.code_length != expected.codec.code_length) {
    throw CheckpointError("checkpoint code length B=" + std::to_string(stored.codec.code_length) +
                          " does not match model B=" +
                          std::to_string(expected.codec.code_length));
  }
  if (!(stored == expected)) {
    throw CheckpointError("checkpoint model config does not match: stored " +
                          to_json(stored).dump() + ", expected " + to_json(expected).dump());
  }
  model.for_each_parameter([&](Parameter<T>& p) {
    const StoredTensor* s = ckpt.find(p.name);
    if (s == nullptr) throw CheckpointError("checkpoint lacks tensor " + p.name);
    if (s->shape != p.value.shape()) {
      throw CheckpointError("tensor " + p.name + " has shape " + shape_str(s->shape) +
                            ", model expects " + shape_str(p.value.shape()));
    }
    p.value = s->as<T>();
  });
}

template <typename T>
Model<T> load_model(const Checkpoint& ckpt) {
  Model<T> model(ckpt.model_config());
  restore_model(ckpt, model);
  return model;
}

template <typename T>
void restore_trainer(const Checkpoint& ckpt, Trainer<T>& trainer) {
  restore_model(ckpt, trainer.model());
  try {
    trainer.set_step(ckpt.meta.at("step").get<std::int64_t>());
    trainer.rng().set_state(ckpt.meta.at("rng_state").get<std::string>());
    AdamState<T>& opt = trainer.optimizer();
    opt.step = ckpt.meta.at("optimizer_step").get<std::int64_t>();
    opt.m.clear();
    opt.v.clear();
    if (opt.step > 0) {
      trainer.model().for_each_parameter([&](const Parameter<T>& p) {
        const StoredTensor* m = ckpt.find("adam.m." + p.name);
        const StoredTensor* v = ckpt.find("adam.v." + p.name);
        if (m == nullptr || v == nullptr) {
          throw CheckpointError("checkpoint lacks optimizer state for " + p.name);
        }
        opt.m.push_back(m->as<T>());
        opt.v.push_back(v->as<T>());
      });
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint lacks training state: ") + e.what());
  }
}

template Tensor<float> StoredTensor::as<float>() const;
template Tensor<double> StoredTensor::as<double>() const;
template StoredTensor store_tensor<float>(std::string, const Tensor<float>&);
template StoredTensor store_tensor<double>(std::string, const Tensor<double>&);
template Checkpoint make_checkpoint<float>(const Model<float>&);
template Checkpoint make_checkpoint<double>(const Model<double>&);
template Checkpoint make_checkpoint<float>(const Trainer<float>&);
template Checkpoint make_checkpoint<double>(const Trainer<double>&);
template void restore_model<float>(const Checkpoint&, Model<float>&);
template void restore_model<double>(const Checkpoint&, Model<double>&);
template Model<float> load_model<float>(const Checkpoint&);
template Model<double> load_model<double>(const Checkpoint&);
template void restore_trainer<float>(const Checkpoint&, Trainer<float>&);
template void restore_trainer<double>(const Checkpoint&, Trainer<double>&);

}  // namespace bitlm
