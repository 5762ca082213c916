#pragma once

#include <stdexcept>
#include <string>

namespace fiberseg {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input that is structurally valid but numerically meaningless (e.g. a constant volume).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

/// Shapes, dims or channel counts that do not agree.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// Arguments violating an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace fiberseg
