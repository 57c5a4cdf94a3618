#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gensec/common.hpp"
#include "gensec/field.hpp"
#include "gensec/mollifier.hpp"

namespace gensec {

// Open region of a chart: the interior of a box, optionally cut down by a
// strict inequality guard(x) > 0 (for curved pieces like disks).
struct Region {
  Box box;
  std::optional<Field> guard;
  std::optional<Expr> guard_expr;  // kept for serialization when available

  static Region guarded(const Box& b, const Expr& g);

  bool contains(const Pt& x) const;
  // Whole of b lies in the region. Guarded regions never certify this; callers
  // fall back to the slow pairing path there.
  bool covers(const Box& b) const;
  bool misses(const Box& b) const;
};

// Closed-form distribution on a chart domain. The general element is a linear
// combination of delta derivatives, densities on regions, and adjoint wrappers
// (pairing-level closures used when a Lie derivative or coordinate derivative
// has no representation in the first two forms).
class Distribution {
 public:
  struct DeltaTerm {
    double coeff;
    Pt p;
    MIdx gamma;
  };
  struct DensityTerm {
    double coeff;
    Region region;
    Field density;
    std::optional<Expr> density_expr;  // kept for serialization when available
  };
  // Pairing rule: coeff * <inner, weight * d^beta psi>.
  struct OpTerm {
    double coeff;
    MIdx beta;
    Field weight;
    std::shared_ptr<const Distribution> inner;
  };

  Distribution() = default;

  static Distribution zero(int n, const Box& domain);
  static Distribution delta(const Box& domain, const Pt& p, const MIdx& gamma = midx0());
  static Distribution density(const Box& domain, const Expr& e);
  static Distribution density(const Box& domain, Field f);
  static Distribution piece(const Box& domain, const Region& r, const Expr& e);
  static Distribution piece(const Box& domain, const Region& r, Field f);
  // 1 on [0, inf) intersected with the (1-D) domain.
  static Distribution heaviside(const Box& domain);
  static Distribution lin_comb(const std::vector<double>& coeffs,
                               const std::vector<Distribution>& us);

  int n() const { return n_; }
  const Box& domain() const { return domain_; }
  bool is_zero() const { return deltas_.empty() && densities_.empty() && ops_.empty(); }
  // Continuity order of the pairing: highest test-function derivative taken.
  int order() const;
  // Bounding box of the support (delta points, density regions, wrapper inners).
  Box support() const;

  Distribution operator+(const Distribution& o) const;
  Distribution operator-(const Distribution& o) const;
  Distribution scaled(double c) const;

  // <u, psi>. Deltas evaluate closed-form; densities integrate density*psi over
  // the region (panel fast path when psi carries quadrature hints and the piece
  // is smooth across psi's whole support); wrappers recurse with a modified
  // test function. Throws EvalError if psi's support leaves the domain,
  // QuadratureError on non-convergence.
  double pair(const TestFn& psi, double abs_tol = 1e-10) const;

  // If u agrees on b with a single smooth field (no deltas, no wrappers, no
  // region boundaries meeting b), returns that field; the zero field when u
  // vanishes near b.
  std::optional<Field> local_density(const Box& b) const;

  // Distributional coordinate derivative. Symbolic where the zoo is closed
  // under it (deltas always; 1-D density pieces produce edge deltas); adjoint
  // wrapper otherwise.
  Distribution deriv(int axis) const;
  // Lie derivative along the smooth field X = (X^1..X^n), acting on
  // distributions identified with functions by chart Lebesgue measure:
  // <L_X u, psi> = -<u, X.grad psi + div(X) psi>.
  Distribution lie(const std::vector<Field>& X) const;
  // Multiplication by a smooth function.
  Distribution mul(const Field& g) const;
  Distribution mul(const Expr& g) const;
  Distribution restricted(const Box& V) const;
  // Extension by zero to a larger ambient box (wrapper inners follow along).
  Distribution with_domain(const Box& d) const;

  // Text record round-trip. Only delta/density data constructed from
  // expressions serializes; wrapper terms are runtime-only.
  std::string serialize() const;
  static Distribution deserialize(const std::string& text);

  const std::vector<DeltaTerm>& deltas() const { return deltas_; }
  const std::vector<DensityTerm>& densities() const { return densities_; }
  const std::vector<OpTerm>& ops() const { return ops_; }

 private:
  int n_ = 1;
  Box domain_ = Box::whole(1);
  std::vector<DeltaTerm> deltas_;
  std::vector<DensityTerm> densities_;
  std::vector<OpTerm> ops_;

  void add_delta(double coeff, const Pt& p, const MIdx& gamma);
  Distribution shell() const;  // same n/domain, no terms
};

// Smooth window: exactly 1 on the plateau box, supported in the support box,
// smooth transitions between. Axes where both boxes are unbounded get no
// transition.
Field bump_window(const Box& plateau, const Box& support);

// Test function with closed-form payload on a support box, smoothly windowed.
TestFn window_test_fn(const Expr& e, const Box& plateau, const Box& support);

}  // namespace gensec
