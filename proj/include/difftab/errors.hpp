#pragma once

#include <stdexcept>
#include <string>

namespace difftab {

// Error taxonomy shared by the whole library.  The CLI maps these onto exit
// codes: usage problems -> 1, data problems -> 2, numeric failures -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape / stride / padding violations on tensor operations.
struct DimensionError : Error {
  using Error::Error;
};

// Out-of-range access (timestep index, row index, ...).
struct IndexError : Error {
  using Error::Error;
};

// API misuse: preconditions that are programming errors rather than bad data
// (non-scalar loss, missing gradient entry, appending to a full table, ...).
struct ContractError : Error {
  using Error::Error;
};

// Invalid configuration values or unknown configuration keys.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed text input (CSV cells, config lines); messages carry row/column.
struct ParseError : Error {
  using Error::Error;
};

// Non-finite states, divergence, or other numeric breakdowns.
struct NumericError : Error {
  using Error::Error;
};

// File-format or file-integrity problems (checkpoints, missing files).
struct IoError : Error {
  using Error::Error;
};

}  // namespace difftab
