#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spodnet {

/// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of the operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A caller-side precondition was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad configuration value (flags, config files, dataset splits).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File could not be read or written, or has an unexpected layout.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cholesky met a non-positive pivot.
class NotPositiveDefinite : public std::runtime_error {
 public:
  explicit NotPositiveDefinite(std::ptrdiff_t pivot)
      : std::runtime_error("matrix is not positive definite (pivot " +
                           std::to_string(pivot) + ")"),
        pivot_(pivot) {}

  std::ptrdiff_t pivot() const noexcept { return pivot_; }

 private:
  std::ptrdiff_t pivot_;
};

/// A Schur quantity that must be strictly positive was not. Indicates a
/// corrupted state upstream, never clamped.
class SpdViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spodnet
