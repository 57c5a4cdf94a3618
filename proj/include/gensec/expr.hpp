#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gensec/common.hpp"

namespace gensec {

// Closed-form scalar expressions on chart coordinates x0,x1,x2 with exact
// rule-based differentiation. Grammar: numbers, variables, + - * / ^,
// exp, sin, cos. Piecewise behavior is handled one level up (regions,
// cutoffs); expressions themselves are smooth on their domain.
class ExprNode;

class Expr {
 public:
  Expr();  // 0
  explicit Expr(double c);
  static Expr num(double c);
  static Expr var(int axis);

  double eval(const double* x) const;
  double eval(const Pt& p) const { return eval(p.data()); }
  Expr diff(int axis) const;
  Expr diff(const MIdx& a) const;

  bool is_zero() const;
  bool is_const(double* out = nullptr) const;
  int max_var() const;  // largest axis used, -1 if constant

  std::string str() const;

  friend Expr operator+(const Expr&, const Expr&);
  friend Expr operator-(const Expr&, const Expr&);
  friend Expr operator*(const Expr&, const Expr&);
  friend Expr operator/(const Expr&, const Expr&);
  friend Expr operator-(const Expr&);
  Expr& operator+=(const Expr& o) { return *this = *this + o; }
  Expr& operator-=(const Expr& o) { return *this = *this - o; }
  Expr& operator*=(const Expr& o) { return *this = *this * o; }

  std::shared_ptr<const ExprNode> node;
  explicit Expr(std::shared_ptr<const ExprNode> n) : node(std::move(n)) {}
};

Expr pow(const Expr& base, const Expr& exponent);
Expr pow(const Expr& base, int exponent);
Expr exp(const Expr& a);
Expr sin(const Expr& a);
Expr cos(const Expr& a);

// Parses the grammar above. Variables: x0,x1,x2 (aliases x,y,z), constant pi.
// Throws ConfigError with line/col on malformed input.
Expr parse_expr(const std::string& text);

// Affine change of coordinates y = A x + b, the only composition the symbolic
// layer needs (chart transitions of the built-in manifolds are affine).
// General smooth compositions live in the field layer.
Expr substitute_affine(const Expr& e, const std::vector<std::vector<double>>& A,
                       const std::vector<double>& b);

}  // namespace gensec
