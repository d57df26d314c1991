#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dis {

/// Violated precondition (shape mismatch, invalid argument).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A flow layer produced a non-finite intermediate value.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(std::size_t layer, const std::string& what)
      : std::runtime_error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// The proposal assigns zero density where the target is positive.
class SupportViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every importance weight is zero.
class DegenerateWeights : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw ContractError(message);
  }
}

}  // namespace dis
