#pragma once

#include <stdexcept>
#include <string>

namespace frk {

enum class ErrorKind {
  shape,
  range,
  argument,
  monotonicity,
  format,
  cardinality,
  lookup,
  integrity,
  parse,
  capacity,
  io,
  divergence,
  usage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape error";
    case ErrorKind::range: return "range error";
    case ErrorKind::argument: return "argument error";
    case ErrorKind::monotonicity: return "monotonicity error";
    case ErrorKind::format: return "format error";
    case ErrorKind::cardinality: return "cardinality error";
    case ErrorKind::lookup: return "lookup error";
    case ErrorKind::integrity: return "integrity error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::capacity: return "capacity error";
    case ErrorKind::io: return "io error";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::usage: return "usage error";
  }
  return "error";
}

/// Base of every exception thrown by the library. The kind decides the
/// process exit code in the CLI.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class KindError : public Error {
 public:
  explicit KindError(const std::string& what) : Error(K, what) {}
};

using ShapeError = KindError<ErrorKind::shape>;
using RangeError = KindError<ErrorKind::range>;
using ArgumentError = KindError<ErrorKind::argument>;
using MonotonicityError = KindError<ErrorKind::monotonicity>;
using FormatError = KindError<ErrorKind::format>;
using CardinalityError = KindError<ErrorKind::cardinality>;
using LookupError = KindError<ErrorKind::lookup>;
using IntegrityError = KindError<ErrorKind::integrity>;
using ParseError = KindError<ErrorKind::parse>;
using CapacityError = KindError<ErrorKind::capacity>;
using IoError = KindError<ErrorKind::io>;
using DivergenceError = KindError<ErrorKind::divergence>;
using UsageError = KindError<ErrorKind::usage>;

}  // namespace frk
