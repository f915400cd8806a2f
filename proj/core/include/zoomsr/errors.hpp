#pragma once

#include <stdexcept>
#include <string>

namespace zoomsr {

// Shape/size violations (mismatched dims, non-divisible factors, too-small inputs).
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration values (empty layer groups, missing temporal offsets, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed files (bad magic, truncated payload, unparsable manifest).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// API contract violations (non-scalar backward root, double backward, t=0 offset).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failures (NaN/Inf detected, singular matrix, degenerate estimation).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem failures carrying the offending path.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace zoomsr
