#pragma once

#include <stdexcept>
#include <string>

namespace gensec {

// Bad input data: malformed config text, inconsistent scenario, q too small.
struct ConfigError : std::runtime_error {
  int line = -1, col = -1;
  ConfigError(const std::string& msg, int line_ = -1, int col_ = -1)
      : std::runtime_error(line_ >= 0 ? msg + " (line " + std::to_string(line_) +
                                            ", col " + std::to_string(col_) + ")"
                                      : msg),
        line(line_),
        col(col_) {}
};

// Failure while building a mathematical object (moment system singular, ...).
struct ConstructionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Evaluation outside the validity region (support crosses the boundary,
// metric numerically singular, ...).
struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct QuadratureError : std::runtime_error {
  double achieved_tol;
  QuadratureError(const std::string& msg, double achieved)
      : std::runtime_error(msg + " (achieved tolerance " +
                           std::to_string(achieved) + ")"),
        achieved_tol(achieved) {}
};

}  // namespace gensec
