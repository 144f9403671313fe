#pragma once

#include <stdexcept>

namespace tail {

// Bad or inconsistent configuration. CLI exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing, corrupt or mismatched data files. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DigestMismatch : public DataError {
 public:
  using DataError::DataError;
};

// NaN/inf during training or inference. CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tail
