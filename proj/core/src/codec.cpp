#include "bitlm/codec.hpp"

#include <string>

namespace bitlm {

int derived_code_length(std::int64_t vocab_size) {
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  int b = 1;
  while ((std::int64_t{1} << b) < vocab_size) ++b;
  return b;
}

CodecConfig CodecConfig::make(std::int64_t vocab_size, int block_size, TokenId bos_id,
                              TokenId eos_id, std::optional<TokenId> fallback_id,
                              std::optional<int> code_length) {
  CodecConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.code_length = code_length.value_or(derived_code_length(vocab_size));
  cfg.block_size = block_size;
  cfg.bos_id = bos_id;
  cfg.eos_id = eos_id;
  cfg.fallback_id = fallback_id.value_or(eos_id);
  cfg.validate();
  return cfg;
}

void CodecConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("codec.vocab_size must be positive");
  if (code_length < 1 || code_length > 62) {
    throw ConfigError("codec.code_length must be in [1, 62]");
  }
  if ((std::int64_t{1} << code_length) < vocab_size) {
    throw ConfigError("codec.code_length " + std::to_string(code_length) +
                      " cannot index " + std::to_string(vocab_size) + " tokens");
  }
  if (block_size < 1) throw ConfigError("codec.block_size must be >= 1");
  for (TokenId id : {bos_id, eos_id, fallback_id}) {
    if (id < 0 || id >= vocab_size) {
      throw ConfigError("codec special token id " + std::to_string(id) +
                        " outside the vocabulary");
    }
  }
}

BitCode encode_token(TokenId id, const CodecConfig& cfg) {
  if (id < 0 || id >= cfg.vocab_size) {
    throw OutOfVocabularyError("token id " + std::to_string(id) +
                               " outside vocabulary of size " +
                               std::to_string(cfg.vocab_size));
  }
  BitCode code;
  code.bits.resize(cfg.bits());
  const auto value = static_cast<std::uint64_t>(id);
  for (std::size_t j = 0; j < cfg.bits(); ++j) {
    const std::size_t shift = cfg.bits() - 1 - j;
    code.bits[j] = ((value >> shift) & 1u) ? std::int8_t{1} : std::int8_t{-1};
  }
  return code;
}

template <typename T>
Decoded decode_bits(std::span<const T> bits, const CodecConfig& cfg) {
  if (bits.size() != cfg.bits()) {
    throw DimensionError("code has " + std::to_string(bits.size()) +
                         " bits, codec expects " + std::to_string(cfg.bits()));
  }
  std::uint64_t value = 0;
  for (T b : bits) {
    value <<= 1;
    if (b == T{1}) {
      value |= 1u;
    } else if (b != T{-1}) {
      throw InvalidCodeError("code entry is not -1 or +1; sign-project before decoding");
    }
  }
  if (value >= static_cast<std::uint64_t>(cfg.vocab_size)) {
    return {cfg.fallback_id, true};
  }
  return {static_cast<TokenId>(value), false};
}

TokenId decode_code(const BitCode& code, const CodecConfig& cfg) {
  return decode_bits<std::int8_t>(code.bits, cfg).id;
}

namespace {

BlockSequence pad_to_blocks(std::span<const TokenId> ids, const CodecConfig& cfg,
                            bool terminate) {
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw OutOfVocabularyError("token id " + std::to_string(id) +
                                 " outside vocabulary of size " +
                                 std::to_string(cfg.vocab_size));
    }
  }
  const std::size_t m = cfg.m();
  BlockSequence seq;
  seq.block_size = m;
  seq.original_length = ids.size();
  seq.ids.assign(m, cfg.bos_id);
  seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  seq.valid.assign(seq.ids.size(), 1);
  bool first_pad = terminate;
  if (terminate && ids.empty()) {
    seq.ids.push_back(cfg.eos_id);
    seq.valid.push_back(1);
    first_pad = false;
  }
  while (seq.ids.size() % m != 0) {
    seq.ids.push_back(cfg.eos_id);
    seq.valid.push_back(first_pad ? 1 : 0);
    first_pad = false;
  }
  return seq;
}

}  // namespace

BlockSequence encode_sequence(std::span<const TokenId> ids, const CodecConfig& cfg) {
  return pad_to_blocks(ids, cfg, true);
}

BlockSequence encode_prompt(std::span<const TokenId> ids, const CodecConfig& cfg) {
  return pad_to_blocks(ids, cfg, false);
}

template <typename T>
Tensor<T> encode_tokens(std::span<const TokenId> ids, const CodecConfig& cfg) {
  Tensor<T> out(ids.size(), cfg.bits());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const BitCode code = encode_token(ids[r], cfg);
    for (std::size_t j = 0; j < cfg.bits(); ++j) out(r, j) = static_cast<T>(code.bits[j]);
  }
  return out;
}

template <typename T>
Tensor<T> BlockSequence::codes(const CodecConfig& cfg) const {
  return encode_tokens<T>(ids, cfg);
}

template <typename T>
Tensor<T> sign_project(const Tensor<T>& block) {
  Tensor<T> out(block.shape());
  for (std::size_t i = 0; i < block.size(); ++i) {
    out[i] = block[i] >= T{0} ? T{1} : T{-1};
  }
  return out;
}

template Decoded decode_bits<float>(std::span<const float>, const CodecConfig&);
template Decoded decode_bits<double>(std::span<const double>, const CodecConfig&);
template Decoded decode_bits<std::int8_t>(std::span<const std::int8_t>, const CodecConfig&);
template Tensor<float> encode_tokens<float>(std::span<const TokenId>, const CodecConfig&);
template Tensor<double> encode_tokens<double>(std::span<const TokenId>, const CodecConfig&);
template Tensor<float> BlockSequence::codes<float>(const CodecConfig&) const;
template Tensor<double> BlockSequence::codes<double>(const CodecConfig&) const;
template Tensor<float> sign_project<float>(const Tensor<float>&);
template Tensor<double> sign_project<double>(const Tensor<double>&);

}  // namespace bitlm
