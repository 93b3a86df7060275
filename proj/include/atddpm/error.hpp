#pragma once

#include <stdexcept>
#include <string>

namespace atddpm {

/// Base for every error raised by the library. The CLI maps subclasses to
/// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on arguments, data, or files was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf reached a place where it must not propagate.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage or configuration keys.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace atddpm
