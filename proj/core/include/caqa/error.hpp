#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace caqa {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of an operation (log of a non-positive value,
/// empty set, gamma <= 0, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a value or gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the computation graph (non-scalar loss, double backward).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `where` is a path into the document.
class FormatError : public Error {
 public:
  FormatError(std::string where, const std::string& what)
      : Error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// One or more configuration fields failed validation.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string out = "invalid configuration";
    for (const auto& s : p) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> problems_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long last_finite_step)
      : Error(what), last_finite_step_(last_finite_step) {}
  long last_finite_step() const noexcept { return last_finite_step_; }

 private:
  long last_finite_step_;
};

}  // namespace caqa
