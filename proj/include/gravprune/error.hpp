#pragma once

#include <stdexcept>
#include <string>

namespace gravprune {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

class NumericError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class ContractError : public Error {
public:
  using Error::Error;
};

}  // namespace gravprune
