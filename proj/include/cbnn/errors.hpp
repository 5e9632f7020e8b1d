#pragma once

#include <stdexcept>
#include <string>

namespace cbnn {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sqrt argument or diagonal entry of the bidiagonal factor collapsed to zero.
class DegenerateFactor : public Error {
 public:
  using Error::Error;
};

// Correlation outside the positive-definiteness bound, or exactly zero.
class InvalidRho : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class MissingForward : public Error {
 public:
  using Error::Error;
};

class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

// Loss or gradient became NaN/Inf during training.
class NumericalBlowup : public Error {
 public:
  using Error::Error;
};

// Checkpoint errors.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

// Dataset errors.
class DataError : public Error {
 public:
  using Error::Error;
};

class BadMagic : public DataError {
 public:
  using DataError::DataError;
};

class DimensionMismatch : public DataError {
 public:
  using DataError::DataError;
};

class CountMismatch : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedRecord : public DataError {
 public:
  using DataError::DataError;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace cbnn
