#pragma once

#include <stdexcept>
#include <string>

namespace radcorrect {

// Invalid or inconsistent configuration (bad K, bad tau, unknown strategy, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent data records (span misalignment, length mismatch, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (NaN gradients, divergence probes).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Requested error type cannot be injected into this report.
class FeasibilityError : public std::runtime_error {
 public:
  explicit FeasibilityError(const std::string& what) : std::runtime_error(what) {}
};

// Training diverged or was handed an unusable corpus.
class TrainingFault : public std::runtime_error {
 public:
  explicit TrainingFault(const std::string& what) : std::runtime_error(what) {}
};

// Chained artifacts were produced under different world configurations.
class FingerprintMismatch : public std::runtime_error {
 public:
  explicit FingerprintMismatch(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace radcorrect
