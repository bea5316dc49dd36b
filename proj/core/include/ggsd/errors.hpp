#pragma once

#include <stdexcept>
#include <string>

namespace ggsd {

// Bad configuration values / unknown keys. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string &msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failures. CLI exit code 3.
struct IoError : std::runtime_error {
  explicit IoError(const std::string &msg) : std::runtime_error(msg) {}
};

// Numeric failures (non-convergence, NaN loss, non-finite values). CLI exit code 4.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string &msg) : std::runtime_error(msg) {}
};

// Violated operation preconditions (shape mismatch, non-symmetric input, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string &msg) : std::runtime_error(msg) {}
};

}  // namespace ggsd
