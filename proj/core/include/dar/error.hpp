#pragma once

#include <stdexcept>
#include <string>

namespace dar {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (label, class id, element id) falls outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is invalid. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)), message_(message) {}
  explicit ConfigError(const std::string& message) : ConfigError("", message) {}
  /// Anchored form: "<location>: <field>: <message>".
  ConfigError(std::string field, const std::string& location, const std::string& message)
      : Error(location + ": " + (field.empty() ? message : field + ": " + message)),
        field_(std::move(field)),
        message_(message) {}

  const std::string& field() const noexcept { return field_; }
  /// The message without field or location prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string field_;
  std::string message_;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Dataset-level failure (e.g. an empty donor pool).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A metric could not be computed (e.g. every element excluded).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Malformed or mismatched file on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace dar
