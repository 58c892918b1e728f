#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bitlm/tensor.hpp"

namespace bitlm {

using TokenId = std::int32_t;

/// Smallest B with 2^B >= vocab_size (B >= 1).
int derived_code_length(std::int64_t vocab_size);

/// Bit order is most-significant-bit first.
struct CodecConfig {
  std::int64_t vocab_size = 0;
  int code_length = 0;
  int block_size = 4;
  TokenId bos_id = 0;
  TokenId eos_id = 0;
  TokenId fallback_id = 0;

  /// Derives B from V unless `code_length` is given; fallback defaults to eos.
  static CodecConfig make(std::int64_t vocab_size, int block_size, TokenId bos_id,
                          TokenId eos_id, std::optional<TokenId> fallback_id = {},
                          std::optional<int> code_length = {});

  /// Throws ConfigError when an invariant is broken.
  void validate() const;

  std::size_t bits() const { return static_cast<std::size_t>(code_length); }
  std::size_t m() const { return static_cast<std::size_t>(block_size); }

  friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

/// A token identity as a {-1,+1}^B vector.
struct BitCode {
  std::vector<std::int8_t> bits;

  friend bool operator==(const BitCode&, const BitCode&) = default;
};

BitCode encode_token(TokenId id, const CodecConfig& cfg);

struct Decoded {
  TokenId id = 0;
  bool fallback = false;  // the pattern was one of the 2^B - V unassigned ones
};

/// Interprets -1/+1 as 0/1. Entries must be exactly -1 or +1; sign-project
/// real-valued blocks first.
template <typename T>
Decoded decode_bits(std::span<const T> bits, const CodecConfig& cfg);

TokenId decode_code(const BitCode& code, const CodecConfig& cfg);

/// Padded, block-aligned token sequence. Row r of `codes()` encodes ids[r].
struct BlockSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;  // false on appended eos padding
  std::size_t original_length = 0;
  std::size_t block_size = 1;

  std::size_t num_blocks() const { return block_size == 0 ? 0 : ids.size() / block_size; }
  std::size_t length() const { return ids.size(); }

  template <typename T>
  Tensor<T> codes(const CodecConfig& cfg) const;
};

/// One block of bos, the ids, then eos until the length is a multiple of m.
/// The first appended eos terminates the sample and stays valid; later ones
/// are padding. An empty input yields the bos block and one eos block.
BlockSequence encode_sequence(std::span<const TokenId> ids, const CodecConfig& cfg);

/// Like encode_sequence but without a terminator: every appended eos is
/// padding and an empty prompt is just the bos block.
BlockSequence encode_prompt(std::span<const TokenId> ids, const CodecConfig& cfg);

/// L x B code matrix for `ids`.
template <typename T>
Tensor<T> encode_tokens(std::span<const TokenId> ids, const CodecConfig& cfg);

/// Elementwise sign with sign(0) = +1.
template <typename T>
Tensor<T> sign_project(const Tensor<T>& block);

}  // namespace bitlm
