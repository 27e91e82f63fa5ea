#pragma once

#include <stdexcept>
#include <string>

namespace conec {

// Bad argument values (non-finite data, non-positive temperature, zero vectors).
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

// Dimension mismatch between operands.
class InvalidShape : public std::invalid_argument {
 public:
  explicit InvalidShape(const std::string& what) : std::invalid_argument(what) {}
};

// Non-convergence, loss of positive-definiteness, NaN during training.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent configuration or missing state (e.g. a GMM for a past domain).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Checkpoint / CSV decoding failures.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace conec
