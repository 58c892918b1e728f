#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bitlm/model.hpp"
#include "bitlm/sampling.hpp"
#include "bitlm/tokenizer.hpp"

namespace bitlm {

/// Synthetic languages for desk-scale evaluation.
///   anbn  a^n b^n with 1 <= n <= 8
///   add3  "x+y=z" with x, y in [0, 999], z = x + y, decimal without
///         leading zeros
struct Grammar {
  std::string name;
  int max_n = 8;

  static Grammar parse(const std::string& name);

  bool accepts(std::string_view s) const;
  /// `count` strings drawn uniformly from the grammar's generator.
  std::vector<std::string> sample(std::size_t count, std::uint64_t seed) const;
  /// Longest string in the language.
  std::size_t max_length() const;
};

struct GrammarEval {
  std::size_t samples = 0;
  std::size_t valid = 0;
  std::size_t unterminated = 0;  // no eos within the token budget
  std::size_t fallback_tokens = 0;
  std::vector<std::string> examples;  // first few generations

  double validity() const {
    return samples == 0 ? 0.0 : static_cast<double>(valid) / static_cast<double>(samples);
  }
};

/// Generates `n_samples` strings from an empty prompt (sample i uses seed
/// seed + i) and counts those the grammar accepts. A generation that does
/// not emit eos within max_length() + 1 tokens is invalid.
template <typename T>
GrammarEval eval_grammar(const Model<T>& model, const ToyTokenizer& tokenizer,
                         const Grammar& grammar, std::size_t n_samples, std::uint64_t seed,
                         const SamplerSchedule& schedule);

}  // namespace bitlm
