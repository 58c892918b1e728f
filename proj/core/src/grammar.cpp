#include "bitlm/grammar.hpp"

#include <charconv>

#include "bitlm/errors.hpp"
#include "bitlm/rng.hpp"

namespace bitlm {

namespace {

// Decimal in [0, 999] without leading zeros; -1 if malformed.
int parse_operand(std::string_view s, std::size_t max_digits) {
  if (s.empty() || s.size() > max_digits) return -1;
  if (s.size() > 1 && s[0] == '0') return -1;
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return -1;
  return v;
}

}  // namespace

Grammar Grammar::parse(const std::string& name) {
  if (name == "anbn" || name == "add3") return Grammar{name, 8};
  throw ConfigError("unknown grammar \"" + name + "\" (expected anbn or add3)");
}

bool Grammar::accepts(std::string_view s) const {
  if (name == "anbn") {
    const std::size_t n = s.size() / 2;
    if (s.size() % 2 != 0 || n < 1 || n > static_cast<std::size_t>(max_n)) return false;
    return s.substr(0, n).find_first_not_of('a') == std::string_view::npos &&
           s.substr(n).find_first_not_of('b') == std::string_view::npos;
  }
  const auto plus = s.find('+');
  const auto eq = s.find('=');
  if (plus == std::string_view::npos || eq == std::string_view::npos || eq < plus) return false;
  const int x = parse_operand(s.substr(0, plus), 3);
  const int y = parse_operand(s.substr(plus + 1, eq - plus - 1), 3);
  const int z = parse_operand(s.substr(eq + 1), 4);
  return x >= 0 && y >= 0 && z >= 0 && x + y == z;
}

std::vector<std::string> Grammar::sample(std::size_t count, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (name == "anbn") {
      const auto n = 1 + rng.next_u64() % static_cast<std::uint64_t>(max_n);
      out.push_back(std::string(n, 'a') + std::string(n, 'b'));
    } else {
      const auto x = rng.next_u64() % 1000, y = rng.next_u64() % 1000;
      out.push_back(std::to_string(x) + "+" + std::to_string(y) + "=" + std::to_string(x + y));
    }
  }
  return out;
}

std::size_t Grammar::max_length() const {
  return name == "anbn" ? 2 * static_cast<std::size_t>(max_n) : 3 + 1 + 3 + 1 + 4;
}

template <typename T>
GrammarEval eval_grammar(const Model<T>& model, const ToyTokenizer& tokenizer,
                         const Grammar& grammar, std::size_t n_samples, std::uint64_t seed,
                         const SamplerSchedule& schedule) {
  GrammarEval eval;
  GenerateOptions opts;
  opts.max_tokens = grammar.max_length() + 1;
  opts.stop_at_eos = true;
  for (std::size_t i = 0; i < n_samples; ++i) {
    opts.seed = seed + i;
    const GenerationResult r = generate<T>(model, {}, schedule, opts);
    std::vector<TokenId> body = r.tokens;
    if (r.eos_seen) body.pop_back();
    // bos or pad inside the body makes the string invalid
    bool clean = true;
    for (TokenId id : body) {
      clean = clean && id >= 0 && id < static_cast<TokenId>(tokenizer.symbols().size());
    }
    const std::string text = tokenizer.decode(body);
    ++eval.samples;
    eval.fallback_tokens += r.stats.fallback_count;
    if (!r.eos_seen) ++eval.unterminated;
    if (r.eos_seen && clean && grammar.accepts(text)) ++eval.valid;
    if (eval.examples.size() < 8) eval.examples.push_back(r.eos_seen ? text : text + "...");
  }
  return eval;
}

template GrammarEval eval_grammar<float>(const Model<float>&, const ToyTokenizer&,
                                         const Grammar&, std::size_t, std::uint64_t,
                                         const SamplerSchedule&);
template GrammarEval eval_grammar<double>(const Model<double>&, const ToyTokenizer&,
                                          const Grammar&, std::size_t, std::uint64_t,
                                          const SamplerSchedule&);

}  // namespace bitlm
