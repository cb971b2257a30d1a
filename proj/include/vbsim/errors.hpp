#pragma once

#include <stdexcept>
#include <string>

namespace vbsim {

// Invalid model, sequence, or config input. CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Propagation or linear-algebra failure (non-finite result, no usable
// kernel vector, ...). CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fit did not converge or the problem is degenerate. CLI exit code 4.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vbsim
