#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bilevel {

/// Operand shapes disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf was about to leave a public operation.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear system judged singular; carries the offending scaled pivot.
class SingularSystemError : public std::runtime_error {
 public:
  SingularSystemError(const std::string& what, double scaled_pivot, std::size_t column)
      : std::runtime_error(what), scaled_pivot_(scaled_pivot), column_(column) {}

  double scaled_pivot() const noexcept { return scaled_pivot_; }
  std::size_t column() const noexcept { return column_; }

 private:
  double scaled_pivot_;
  std::size_t column_;
};

/// The problem instance cannot provide what the requested engine needs.
class CapabilityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Constraint structure the LQ direction does not handle (inequalities).
class UnsupportedConstraintError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file; `line()` is 1-based, 0 when not line-specific.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace bilevel
