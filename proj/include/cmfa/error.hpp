#pragma once

#include <stdexcept>
#include <string>

namespace cmfa {

// Bad input: malformed files, invalid parameters, violated preconditions.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, failed factorizations, underflowed truncation regions.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmfa
