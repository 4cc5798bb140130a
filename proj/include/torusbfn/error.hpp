#pragma once

#include <stdexcept>
#include <string>

namespace torusbfn {

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Root finding / schedule construction failed.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched vector or matrix shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A non-finite value appeared where a finite one is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_finite(double x, const char* what) {
  if (!(x - x == 0.0)) {
    throw DomainError(std::string(what) + ": argument must be finite");
  }
}

inline void require_nonnegative(double x, const char* what) {
  require_finite(x, what);
  if (x < 0.0) {
    throw DomainError(std::string(what) + ": argument must be nonnegative, got " + std::to_string(x));
  }
}

}  // namespace detail
}  // namespace torusbfn
