// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qattack {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand ranks or dimensions do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller-supplied parameter is outside its valid range (K > rows, bad cap, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A data invariant would be violated (non-positive scale, non-finite value, ...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Binary file errors. Each failure mode has its own type so callers can tell
// a wrong file from a damaged one.
class FormatError : public Error {
 public:
  using Error::Error;
};

class MagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace qattack
