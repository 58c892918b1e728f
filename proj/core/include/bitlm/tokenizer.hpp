#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bitlm/codec.hpp"
#include "bitlm/config.hpp"

namespace bitlm {

/// Toy tokenizers. Ids are dense in [0, V): the symbols first, then bos and
/// eos (and pad in byte mode).
///
/// byte     256 byte values, bos=256, eos=257, pad=258. Lossless on any input.
/// char     the distinct bytes of a corpus, sorted.
/// grammar  the alphabet of a synthetic grammar ("anbn": a b; "add3": 0-9 + =).
class ToyTokenizer {
 public:
  static ToyTokenizer byte_level();
  static ToyTokenizer char_vocab(std::span<const std::string> corpus);
  static ToyTokenizer for_grammar(const std::string& grammar);
  /// Builds the tokenizer a run config asks for; char mode needs the corpus.
  static ToyTokenizer from_settings(const TokenizerSettings& s,
                                    std::span<const std::string> corpus = {});

  const std::string& mode() const { return mode_; }
  std::int64_t vocab_size() const { return static_cast<std::int64_t>(symbols_.size()) + specials_; }
  TokenId bos_id() const { return static_cast<TokenId>(symbols_.size()); }
  TokenId eos_id() const { return bos_id() + 1; }
  std::optional<TokenId> pad_id() const;
  const std::string& symbols() const { return symbols_; }

  /// Throws OutOfVocabularyError naming the first byte without an id.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Special ids are dropped.
  std::string decode(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;
  static ToyTokenizer from_json(const nlohmann::json& j);

  friend bool operator==(const ToyTokenizer&, const ToyTokenizer&) = default;

 private:
  ToyTokenizer(std::string mode, std::string symbols, int specials);

  std::string mode_;
  std::string symbols_;  // byte value of each symbol id
  int specials_ = 2;
  std::vector<std::int16_t> lookup_;  // byte -> id or -1
};

}  // namespace bitlm
