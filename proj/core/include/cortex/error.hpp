#pragma once

#include <stdexcept>
#include <string>

namespace cortex {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A configuration violates one of its documented constraints.
class ConfigError : public Error {
  public:
    using Error::Error;
};

/// An argument lies outside the domain of an operation (bad index, bad temperature, NaN input).
class DomainError : public Error {
  public:
    using Error::Error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

/// Caller misuse that is not a domain violation (missing inputs, empty datasets, non-scalar roots).
class UsageError : public Error {
  public:
    using Error::Error;
};

/// A file exists but its contents do not parse.
class FormatError : public Error {
  public:
    using Error::Error;
};

class VersionError : public FormatError {
  public:
    using FormatError::FormatError;
};

class IoError : public Error {
  public:
    using Error::Error;
};

/// A numerical evaluation produced a non-finite value.
class NumericError : public Error {
  public:
    using Error::Error;
};

class TrainingError : public NumericError {
  public:
    using NumericError::NumericError;
};

class OptimizationError : public NumericError {
  public:
    using NumericError::NumericError;
};

}  // namespace cortex
