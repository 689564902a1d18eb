#pragma once

#include <stdexcept>
#include <string>

namespace rewardlab {

// Error taxonomy, mapped to CLI exit codes: ValidationError and its
// subclasses exit 1, everything else (runtime/training failures) exits 2.

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between tensors.
struct DimensionError : ValidationError {
  using ValidationError::ValidationError;
};

// Bad caller-supplied value (out-of-range token, empty dataset, ...).
struct InputError : ValidationError {
  using ValidationError::ValidationError;
};

// API misuse (non-scalar loss node, mixing tapes, ...).
struct ContractError : ValidationError {
  using ValidationError::ValidationError;
};

// Malformed file content.
struct ParseError : ValidationError {
  using ValidationError::ValidationError;
};

// A numeric operation produced or received a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged or could not proceed.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rewardlab
