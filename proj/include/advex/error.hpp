#pragma once

#include <stdexcept>
#include <string>

namespace advex {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operands with incompatible shapes; raised before any computation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (negative psi, d <= 0, K > V, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or wire data.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace advex
