#pragma once

#include <optional>
#include <string>

#include "gensec/bump.hpp"
#include "gensec/common.hpp"
#include "gensec/field.hpp"

namespace gensec {

// A compactly supported test function: a field plus its support box.
struct TestFn {
  Field f;
  Box support;
  // Nonzero: integrands against this function are analytic on the support and
  // a fixed panelized Gauss-Legendre rule of this order is accurate to ~1e-12.
  int gl_order = 0;
  int gl_panels = 0;
};

// Smooth profile with unit mass and vanishing moments of orders 1..q,
// supported in the Euclidean ball of radius r0 <= 1. Realized as a tensor
// product of identical 1-D profiles (polynomial multiple of the normalized
// standard bump), per-axis half-width r0/sqrt(n), so every mixed moment
// through order q vanishes and the support stays inside the r0 ball.
class Mollifier {
 public:
  int n = 1;
  int q = 0;
  double r0 = 1.0;
  std::string base = "bump";
  Poly poly;             // multiplier on the normalized base, solved or loaded
  double base_mass = 0;  // integral of the raw bump over [-1,1]

  double half_width() const { return r0 / std::sqrt(double(n)); }

  // d^m/dt^m of the 1-D unit-mass profile factor (support [-1,1] scaled by h).
  double profile1_deriv(int m, double t) const;
  // Per-axis-scaled profile on the box [-h,h]^n: value of d^beta rho at y.
  double profile_deriv(const MIdx& beta, const Pt& y) const;
  double profile(const Pt& y) const { return profile_deriv(midx0(), y); }

  // Checked numerically on construction; also exposed for tests.
  double mass_error() const;                      // |integral - 1|
  double moment(const MIdx& alpha) const;         // n-D moment by product
  int effective_moment_order(int max_check) const;

  std::string serialize() const;
  static Mollifier deserialize(const std::string& text);
};

// Builds the profile by solving the (q+1)x(q+1) Hankel moment system over
// polynomial multiples of the base bump. Throws ConstructionError naming the
// offending moment if the system is singular, and verifies unit mass (1e-10)
// and vanishing moments (1e-8) after the solve.
Mollifier make_mollifier(int n, int q, const std::string& base = "bump",
                         double r0 = 1.0);

// Exposed for direct testing of the failure path: solves sum_k mu[j+k] c_k =
// delta_{j0}; throws ConstructionError naming the offending moment on rank
// deficiency.
std::vector<double> solve_moment_coeffs(const std::vector<double>& mu, int q);

// The net of scaled translated kernels (eps, x) -> eps^{-n} rho((y-x)/eps).
// Derivative access is closed-form through the profile recurrences:
//   d^alpha_x d^beta_y kernel = (-1)^|alpha| eps^(-n-|alpha|-|beta|) *
//                               (d^(alpha+beta) rho)((y-x)/eps)
class KernelNet {
 public:
  Mollifier rho;

  explicit KernelNet(Mollifier m) : rho(std::move(m)) {}

  double value(double eps, const Pt& x, const MIdx& alpha, const Pt& y,
               const MIdx& beta) const;
  // y -> d^alpha_x kernel_eps(x, y) as a test function (derivable in y).
  TestFn kernel(double eps, const Pt& x, const MIdx& alpha = midx0()) const;
  double support_radius(double eps) const { return eps * rho.r0; }
  Box support_box(double eps, const Pt& x) const;
};

}  // namespace gensec
