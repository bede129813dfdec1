#pragma once

#include <stdexcept>
#include <string>

namespace ot {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file content.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input that parses but violates a dataset invariant.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Unknown question, subject, student or parameter id.
class LookupError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration (bad fractions, task/head mismatch, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ot
