#pragma once

#include <stdexcept>
#include <string>

namespace hyke {

// Base of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing, malformed or inconsistent data on disk (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, domain violations (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Operand shapes do not conform to the requested operation.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace hyke
