#pragma once

#include <stdexcept>
#include <string>

namespace glossmt {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or hyper-parameter value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unusable input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Parallel files disagree in line count.
class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

// Artifacts that cannot be used together (vocabulary or format mismatch).
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace glossmt
