#pragma once

#include <cstdint>
#include <vector>

#include "bitlm/codec.hpp"
#include "bitlm/model.hpp"
#include "bitlm/rng.hpp"

namespace fixture {

/// Small model: bos = V - 2, eos = V - 1, two heads everywhere.
inline bitlm::ModelConfig tiny(int block_size, std::int64_t vocab = 8, int hidden = 8,
                               int layers = 1) {
  bitlm::ModelConfig c;
  c.codec = bitlm::CodecConfig::make(vocab, block_size, static_cast<bitlm::TokenId>(vocab - 2),
                                     static_cast<bitlm::TokenId>(vocab - 1));
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

inline std::vector<bitlm::TokenId> random_ids(std::size_t n, std::int64_t vocab,
                                              std::uint64_t seed) {
  bitlm::Rng rng(seed);
  std::vector<bitlm::TokenId> ids(n);
  for (auto& id : ids) id = static_cast<bitlm::TokenId>(rng.next_u64() % vocab);
  return ids;
}

template <typename T>
bitlm::Tensor<T> random_codes(std::size_t n, const bitlm::CodecConfig& codec,
                              std::uint64_t seed) {
  return bitlm::encode_tokens<T>(random_ids(n, codec.vocab_size, seed), codec);
}

template <typename T>
bitlm::Tensor<T> gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  bitlm::Rng rng(seed);
  bitlm::Tensor<T> t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal());
  return t;
}

}  // namespace fixture

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace fixture {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("bitlm-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
