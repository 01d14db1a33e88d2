#pragma once

#include <stdexcept>
#include <string>

namespace halluc {

// Bad user-supplied input: malformed files, out-of-vocabulary words, invalid
// configuration values. The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace halluc
