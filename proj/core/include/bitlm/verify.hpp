#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bitlm/model.hpp"

namespace bitlm {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double measured = 0;   // error or count the verdict is based on
  double threshold = 0;
  std::string detail;

  nlohmann::json to_json() const;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Deliberate faults for checking that the suite can fail. Known: "mask"
  /// (flips one entry of the block-causal mask before the oracle compares).
  std::vector<std::string> faults;
};

/// Structural invariants that hold for any weights: codec roundtrip, mask
/// oracle, m=1 reduction, KV-cache equivalence, finite-difference gradients,
/// the joint-realization Jacobian probe and the sampler identities.
///
/// With `model` the backbone, head and sampler checks also run on its
/// weights (cast to fp64) in addition to freshly initialized ones.
std::vector<PropertyResult> run_verify_suite(const VerifyOptions& options,
                                             const Model<float>* model = nullptr);

// Individual properties, usable on their own.
PropertyResult verify_codec_roundtrip(std::int64_t vocab_size);
PropertyResult verify_mask_oracle(bool inject_fault);
PropertyResult verify_m1_reduction(const Model<double>& model, std::size_t length,
                                   std::uint64_t seed);
template <typename T>
PropertyResult verify_kv_equivalence(const Model<T>& model, std::size_t blocks,
                                     std::uint64_t seed, double tolerance);
PropertyResult verify_gradients(std::uint64_t seed);
PropertyResult verify_joint_realization(const Model<double>& model, std::uint64_t seed);
PropertyResult verify_factorized_head(std::uint64_t seed);
PropertyResult verify_sampler_identities(const Model<double>& model, std::uint64_t seed);

/// Overwrites every parameter with N(0, scale^2) draws. Untrained heads
/// have zero output layers, which would make gradient and Jacobian probes
/// vacuous.
template <typename T>
void randomize_parameters(Model<T>& model, std::uint64_t seed, double scale);

}  // namespace bitlm
