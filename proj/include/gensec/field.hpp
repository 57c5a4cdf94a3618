#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "gensec/bump.hpp"
#include "gensec/common.hpp"
#include "gensec/expr.hpp"

namespace gensec {

class FieldNode;

// Smooth scalar function on a chart with exact derivatives of every order.
// Immutable DAG; evaluation is pure (safe to share across threads). Derivative
// construction is structural (no finite differences anywhere).
class Field {
 public:
  Field();  // structural zero
  explicit Field(std::shared_ptr<const FieldNode> n) : node(std::move(n)) {}

  static Field constant(double c);
  static Field from_expr(const Expr& e);
  static Field sum(std::vector<Field> terms);            // flattens, drops zeros
  static Field product(std::vector<Field> factors);      // flattens, drops ones
  static Field scale(double c, const Field& f);
  static Field recip(const Field& f);
  // x -> inner(map(x)); map components are closed-form expressions.
  static Field compose(const Field& inner, std::vector<Expr> map);
  static Field cutoff(std::vector<std::pair<int, Cutoff1D>> axes);

  double eval(const double* x) const;
  double eval(const Pt& p) const { return eval(p.data()); }
  Field d(int axis) const;
  Field d(const MIdx& a) const;
  bool is_zero() const;

  friend Field operator+(const Field& a, const Field& b) {
    return sum({a, b});
  }
  friend Field operator*(const Field& a, const Field& b) {
    return product({a, b});
  }
  friend Field operator-(const Field& a, const Field& b) {
    return sum({a, scale(-1.0, b)});
  }

  std::shared_ptr<const FieldNode> node;
};

class FieldNode {
 public:
  virtual ~FieldNode() = default;
  virtual double eval(const double* x) const = 0;
  virtual Field deriv(int axis) const = 0;
};

}  // namespace gensec
