#pragma once

#include <stdexcept>
#include <string>

namespace emodpo {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an operation's input was violated.
class InputDomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (bad weights, smoothing mass, sizes).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File missing, unwritable, truncated, or with a malformed field.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became non-finite. `component()` names the culprit.
class NumericalError : public Error {
 public:
  NumericalError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace emodpo
