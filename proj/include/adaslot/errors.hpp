#pragma once

#include <stdexcept>
#include <string>

namespace adaslot {

// Shape/dimension mismatches between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (non-scalar loss, tau <= 0, bad axis, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or other numeric failures.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files (container, dataset, checkpoint).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (unknown key, invalid value, hash mismatch).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Scene generation gave up (impossible spec).
struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Command-line misuse (bad flag combination or argument value).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace adaslot
