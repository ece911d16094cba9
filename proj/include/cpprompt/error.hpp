#pragma once

#include <stdexcept>
#include <string>

namespace cpprompt {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or otherwise non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API called out of contract (non-scalar loss, missing gradient, unknown domain).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or structural settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset contents (labels, token ids, empty splits).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Optimisation diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Stored file failed its integrity check or ended early.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Stored file is not in the expected container format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Stored file uses a container version this build cannot read.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Loaded tensor does not match the shape the receiving model expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cpprompt
