#pragma once

#include <stdexcept>
#include <string>

namespace petduet {

/// Raised when an input violates a documented precondition (bad box, bad
/// shape, unknown category, malformed file). Callers map it to a usage or
/// data error; it is never used for internal invariant failures.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a persisted artifact cannot be read or does not match the
/// state it is being loaded into (config hash mismatch, truncated archive).
class ArtifactError : public std::runtime_error {
 public:
  explicit ArtifactError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace petduet
