#pragma once

#include <stdexcept>
#include <string>

namespace bitlm {

/// Tensor shapes that do not line up for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An argument outside the mathematical domain of an operation
/// (t outside [0,1], K == 0, position < 1, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class OutOfVocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A code vector with an entry that is not exactly -1 or +1.
class InvalidCodeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Sequence or cache length not aligned to the block size.
class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CacheCorruptionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, std::string diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}

  /// JSON snapshot of the step that produced the non-finite value.
  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

}  // namespace bitlm
