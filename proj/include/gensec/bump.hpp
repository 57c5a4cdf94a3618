#pragma once

#include <vector>

#include "gensec/common.hpp"

namespace gensec {

// Dense 1-D polynomial, coefficient c[k] on t^k.
struct Poly {
  std::vector<double> c;

  Poly() = default;
  explicit Poly(std::vector<double> coeffs) : c(std::move(coeffs)) {}
  static Poly monomial(int k, double a = 1.0);

  double eval(double t) const;
  Poly deriv() const;
  Poly operator+(const Poly& o) const;
  Poly operator*(const Poly& o) const;
  Poly operator*(double s) const;
  int degree() const { return int(c.size()) - 1; }
};

// B(t) = exp(-1/(1-t^2)) on (-1,1), 0 outside. All derivatives closed-form:
// B^(m)(t) = R_m(t) / (1-t^2)^(2m) * B(t) with polynomial R_m by recurrence.
double bump_deriv(int m, double t);
inline double bump(double t) { return bump_deriv(0, t); }

// f(t) = exp(-1/t) on (0,inf), 0 on (-inf,0]. f^(m)(t) = P_m(t)/t^(2m) f(t).
double exp_recip_deriv(int m, double t);

// C-infinity step: 0 for t<=0, 1 for t>=1, f(t)/(f(t)+f(1-t)) between.
// Returns the m-th derivative; exact 0.0 / 1.0 off the transition.
double smooth_step_deriv(int m, double t);

// One-dimensional plateau cutoff:
//   0 on (-inf,a0], rises on [a0,a1], == 1 on [a1,b1], falls on [b1,b0],
//   0 on [b0,inf). a0 = -inf drops the left transition, b0 = +inf the right.
// Plateau values are exactly 1.0 and plateau derivatives exactly 0.0, which
// downstream exactness arguments rely on.
struct Cutoff1D {
  double a0 = -kInf, a1 = -kInf, b1 = kInf, b0 = kInf;

  double eval_deriv(int m, double t) const;
  bool in_plateau(double t) const { return t >= a1 && t <= b1; }
};

}  // namespace gensec
