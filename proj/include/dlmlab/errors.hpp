#pragma once

#include <stdexcept>
#include <string>

namespace dlmlab {

/// Shapes of the operands do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity reached a place where only finite values are allowed.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// An iterative routine hit its sweep cap.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller-supplied arguments violate a documented precondition.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated IDX input.
class IdxFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dlmlab
