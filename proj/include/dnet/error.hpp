#pragma once

#include <stdexcept>
#include <string>

namespace dnet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape, extent or argument contract violated by the caller.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A file or byte stream does not follow its documented layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a kernel, non-finite loss, failed gradient check.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration (config files, model configs, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dnet
