#pragma once

#include <stdexcept>
#include <string>

namespace pglode {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration (maps to CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape, grid or file-content problems (CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during integration or training (CLI exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace pglode
