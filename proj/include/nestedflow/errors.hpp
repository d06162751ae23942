#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace nestedflow {

/// Argument outside the mathematical domain of an operation (zero Householder
/// vector, k out of range, non-symmetric input, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A triangular factor with a zero pivot.
class SingularityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN or Inf produced while evaluating a loss. `op` names the primitive
/// that produced it; `row` is the first offending batch row when known.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string message, std::string op,
                 std::optional<std::size_t> row = std::nullopt)
      : std::runtime_error(std::move(message)), op_(std::move(op)), row_(row) {}

  const std::string& op() const noexcept { return op_; }
  std::optional<std::size_t> row() const noexcept { return row_; }

 private:
  std::string op_;
  std::optional<std::size_t> row_;
};

/// Malformed data file. Carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or evaluation hit a numerical failure it cannot recover from.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nestedflow
