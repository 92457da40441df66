#pragma once

#include <stdexcept>
#include <string>

namespace apa {

// Shapes of operands do not agree.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File exists but is not in the expected format or version.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Content hash does not match the manifest.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace apa
