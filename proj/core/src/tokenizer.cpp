#include "bitlm/tokenizer.hpp"

#include <cstdio>

#include "bitlm/errors.hpp"

namespace bitlm {

ToyTokenizer::ToyTokenizer(std::string mode, std::string symbols, int specials)
    : mode_(std::move(mode)), symbols_(std::move(symbols)), specials_(specials), lookup_(256, -1) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto byte = static_cast<unsigned char>(symbols_[i]);
    if (lookup_[byte] != -1) throw ConfigError("tokenizer: duplicate symbol");
    lookup_[byte] = static_cast<std::int16_t>(i);
  }
}

ToyTokenizer ToyTokenizer::byte_level() {
  std::string all(256, '\0');
  for (int b = 0; b < 256; ++b) all[b] = static_cast<char>(b);
  return ToyTokenizer("byte", std::move(all), 3);
}

ToyTokenizer ToyTokenizer::char_vocab(std::span<const std::string> corpus) {
  bool seen[256] = {};
  for (const auto& line : corpus) {
    for (char c : line) seen[static_cast<unsigned char>(c)] = true;
  }
  std::string symbols;
  for (int b = 0; b < 256; ++b) {
    if (seen[b]) symbols.push_back(static_cast<char>(b));
  }
  if (symbols.empty()) throw ConfigError("tokenizer: char mode needs a nonempty corpus");
  return ToyTokenizer("char", std::move(symbols), 2);
}

ToyTokenizer ToyTokenizer::for_grammar(const std::string& grammar) {
  if (grammar == "anbn") return ToyTokenizer("grammar:anbn", "ab", 2);
  if (grammar == "add3") return ToyTokenizer("grammar:add3", "0123456789+=", 2);
  throw ConfigError("tokenizer.grammar: unknown grammar \"" + grammar + "\"");
}

ToyTokenizer ToyTokenizer::from_settings(const TokenizerSettings& s,
                                         std::span<const std::string> corpus) {
  if (s.mode == "byte") return byte_level();
  if (s.mode == "char") return char_vocab(corpus);
  if (s.mode == "grammar") return for_grammar(s.grammar);
  throw ConfigError("tokenizer.mode: expected byte, char or grammar, got \"" + s.mode + "\"");
}

std::optional<TokenId> ToyTokenizer::pad_id() const {
  if (specials_ < 3) return std::nullopt;
  return eos_id() + 1;
}

std::vector<TokenId> ToyTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const std::int16_t id = lookup_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      char hex[8];
      std::snprintf(hex, sizeof(hex), "0x%02x", static_cast<unsigned char>(text[i]));
      throw OutOfVocabularyError(std::string("byte ") + hex + " at offset " + std::to_string(i) +
                                 " is not in the " + mode_ + " vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string ToyTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id >= 0 && static_cast<std::size_t>(id) < symbols_.size()) out.push_back(symbols_[id]);
  }
  return out;
}

nlohmann::json ToyTokenizer::to_json() const {
  nlohmann::json j = {{"mode", mode_}, {"vocab_size", vocab_size()}, {"bos_id", bos_id()},
                      {"eos_id", eos_id()}};
  if (mode_ == "char") {
    std::vector<int> bytes;
    for (char c : symbols_) bytes.push_back(static_cast<unsigned char>(c));
    j["symbols"] = bytes;
  }
  return j;
}

ToyTokenizer ToyTokenizer::from_json(const nlohmann::json& j) {
  try {
    const auto mode = j.at("mode").get<std::string>();
    ToyTokenizer t = [&] {
      if (mode == "byte") return byte_level();
      if (mode.rfind("grammar:", 0) == 0) return for_grammar(mode.substr(8));
      if (mode == "char") {
        std::string symbols;
        for (int b : j.at("symbols").get<std::vector<int>>()) {
          if (b < 0 || b > 255) throw ConfigError("tokenizer: symbol byte out of range");
          symbols.push_back(static_cast<char>(b));
        }
        return ToyTokenizer("char", std::move(symbols), 2);
      }
      throw ConfigError("tokenizer: unknown mode \"" + mode + "\"");
    }();
    if (t.vocab_size() != j.at("vocab_size").get<std::int64_t>()) {
      throw ConfigError("tokenizer: stored vocab_size disagrees with mode");
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tokenizer: ") + e.what());
  }
}

}  // namespace bitlm
