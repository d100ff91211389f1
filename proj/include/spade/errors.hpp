#pragma once

#include <stdexcept>
#include <string>

namespace spade {

/// Process exit codes used by the CLI.
enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const { return ExitCode::kData; }
};

// Bad argument or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kConfig; }
};

class ConfigError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Singular transform, empty overlap, ...
class GeometryError : public DataError {
 public:
  using DataError::DataError;
};

class OutOfFieldError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

// Zero-variance volume, zero-length embedding, ...
class DegenerateInputError : public DataError {
 public:
  using DataError::DataError;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

class AvailabilityError : public DataError {
 public:
  AvailabilityError(const std::string& what, std::size_t usable)
      : DataError(what), usable_(usable) {}
  std::size_t usable() const { return usable_; }

 private:
  std::size_t usable_;
};

class SamplingExhaustedError : public DataError {
 public:
  using DataError::DataError;
};

class CohortError : public DataError {
 public:
  using DataError::DataError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kNumerical; }
};

}  // namespace spade
