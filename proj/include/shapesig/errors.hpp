#pragma once

#include <stdexcept>
#include <string>

namespace shapesig {

// Invalid user-facing input (malformed files, inconsistent generation
// plans, bad CLI arguments). Maps to exit code 1 at the CLI boundary;
// everything else that escapes maps to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace shapesig
