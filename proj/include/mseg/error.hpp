#pragma once

#include <stdexcept>
#include <string>

namespace mseg {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, divergence, or a failed numerical check.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values, presets or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system and data-format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed serialized data. `kind` distinguishes the failure.
class FormatError : public IoError {
 public:
  enum class Kind {
    BadMagic,
    BadHeader,
    Truncated,
    Overlap,
    Misaligned,
    SizeMismatch,
    BadMaxval,
  };

  FormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mseg
