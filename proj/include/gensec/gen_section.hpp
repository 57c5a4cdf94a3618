#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gensec/common.hpp"
#include "gensec/distribution.hpp"
#include "gensec/field.hpp"
#include "gensec/geometry.hpp"
#include "gensec/mollifier.hpp"
#include "gensec/smoothing.hpp"

namespace gensec {

// One smoothing net per chart for a bundle in scope.
struct TestObjectAssignment {
  std::shared_ptr<const Bundle> E;
  std::vector<VectorOpNet> nets;
};

// Finite family of test objects, keyed by bundle (each bundle at most once).
// Generalized sections evaluate against one of these.
class PhiFamily {
 public:
  PhiFamily() = default;

  static std::string key(const Bundle& E);

  // Replaces any previous assignment for the same bundle.
  void assign(std::shared_ptr<const Bundle> E, std::vector<VectorOpNet> nets);
  const TestObjectAssignment* find(const Bundle& E) const;
  const TestObjectAssignment& at(const Bundle& E) const;  // throws ConstructionError
  const std::vector<TestObjectAssignment>& items() const { return items_; }
  bool empty() const { return items_.empty(); }

  // Entrywise ca*a + cb*b over the union of keys (missing entries count as
  // absent, not zero: both families must assign the same bundles).
  static PhiFamily lin_comb(double ca, const PhiFamily& a, double cb, const PhiFamily& b);

 private:
  std::vector<TestObjectAssignment> items_;  // sorted by key
};

// Plain kernel family for one bundle: mollifier_net(rho, chart box, fiber dim)
// on every chart.
PhiFamily mollifier_family(std::shared_ptr<const Bundle> E, const Mollifier& rho);

// A generalized section evaluated at one test family and eps: smooth fiber
// components per chart.
struct EvalSection {
  std::shared_ptr<const Bundle> E;
  double eps = 0;
  std::vector<std::vector<Field>> comp;  // [chart][fiber]

  std::vector<double> values(int chart, const Box& K, int per_axis, int k,
                             const MIdx& alpha = midx0()) const;
  // sup over components and grid of |d^alpha comp| for |alpha| <= derivs.
  double sup_norm(int chart, const Box& K, int per_axis, int derivs = 0) const;
};

struct GenNode;
class GenConnection;

// Expression in the basic space of generalized sections: an immutable tree
// whose evaluation at a test family is polynomial in the family (except
// through metric connections, which are rational; see polynomial()).
class GenSection {
 public:
  GenSection() = default;

  static GenSection embed(DistributionalSection u);
  static GenSection smooth(SmoothSection s);
  static GenSection tensor(const GenSection& a, const GenSection& b);
  static GenSection contract(const GenSection& r, int up_slot, int down_slot);
  // f over the trivial line bundle of the same base.
  static GenSection scalar_mul(const GenSection& f, const GenSection& r);
  static GenSection lin_comb(std::vector<double> c, std::vector<GenSection> rs);
  static GenSection lie_hat(SmoothSection X, const GenSection& r);
  static GenSection lie_tilde(const GenSection& X, const GenSection& r);
  static GenSection bracket(const GenSection& X, const GenSection& Y);
  // Transport along an affine bundle isomorphism; single-chart bases only.
  static GenSection pushforward(const BundleIso& iso, const GenSection& r);

  bool valid() const { return node_ != nullptr; }
  const Bundle& bundle() const;
  const std::shared_ptr<const Bundle>& bundle_ptr() const;

  // Bundles the evaluation family must assign, as sorted keys.
  std::vector<std::string> index_set() const;
  int degree(const Bundle& G) const;
  int total_degree() const;
  // False once evaluation passes through a metric connection; differentials
  // then fall back to finite differences in the perturbation parameter.
  bool polynomial() const;
  bool is_local() const { return valid(); }

  EvalSection evaluate(const PhiFamily& phi, double eps) const;
  // Exact j-th directional differential, j = dirs.size(); returns structural
  // zeros beyond the polynomial degree.
  EvalSection differential(const PhiFamily& phi, const std::vector<PhiFamily>& dirs,
                           double eps) const;

  // Leafwise restriction onto a sub-box of a single-chart base.
  GenSection restricted(const Box& V) const;

  std::string serialize() const;
  static GenSection deserialize(const std::string& text);

  const GenNode& node() const { return *node_; }

 private:
  explicit GenSection(std::shared_ptr<const GenNode> n) : node_(std::move(n)) {}
  std::shared_ptr<const GenNode> node_;
  friend struct GenNode;
  friend class GenConnection;
};

// Directional differential by polynomial interpolation of R(Phi + t Psi) in t
// (degree + 1 nodes, exact for polynomial trees). The independent cross-check
// for the symbolic rules.
EvalSection differential_interp(const GenSection& r, int j, const PhiFamily& phi,
                                const PhiFamily& psi, double eps);

// Covariant derivative data: a smooth base connection plus an optional
// generalized difference tensor (Christoffel-shaped, pattern up/down/down), or
// a generalized metric evaluated through the coordinate Levi-Civita formula.
class GenConnection {
 public:
  struct Impl;

  static GenConnection smooth(SmoothConnection c);
  static GenConnection affine(SmoothConnection c, GenSection S);
  static GenConnection metric_lc(GenSection g);

  const ChartedManifold& base() const;
  const std::shared_ptr<const ChartedManifold>& base_ptr() const;
  bool polynomial() const;
  bool moderate() const { return true; }
  bool local() const { return true; }
  const std::optional<GenSection>& difference() const;
  const std::optional<GenSection>& metric() const;

  // Gamma^k_{ij}(Phi) fields, [chart][(k*n+i)*n+j].
  std::vector<std::vector<Field>> christoffels(const PhiFamily& phi, double eps) const;

  // For metric connections: require det g(Phi_eps) >= floor * eps^N over the
  // grid for every listed eps; throws EvalError naming the worst point and
  // eps. No-op for smooth/affine connections.
  void verify_nonsingular(const PhiFamily& phi, const std::vector<double>& eps_list,
                          int chart, const Box& K, int per_axis, double floor,
                          int N) const;

 private:
  std::shared_ptr<const Impl> impl_;
  friend struct GenNode;
};

GenSection cov_deriv(const GenConnection& conn, const GenSection& X, const GenSection& r);
// nabla_X nabla_Y s - nabla_Y nabla_X s - nabla_[X,Y] s as an expression tree.
GenSection gen_curvature(const GenConnection& conn, const GenSection& X,
                         const GenSection& Y, const GenSection& s);
GenConnection levi_civita(const GenSection& g);
// R^l_{kij} fields of the connection at one family, pattern (up,down,down,down).
EvalSection curvature_tensor(const GenConnection& conn, const PhiFamily& phi, double eps);

// Determinant of a square-matrix section evaluation at grid points; returns
// the minimum and writes the attaining point.
double metric_det_min(const EvalSection& g, int chart, const Box& K, int per_axis,
                      Pt* worst = nullptr);

// Componentwise transport of a distributional section along an affine bundle
// isomorphism (single-chart bases).
DistributionalSection pushforward_dist(const BundleIso& iso,
                                       const DistributionalSection& u);

// Pointwise inverse-matrix entry of a square matrix of fields, with the exact
// derivative rule d(g^-1) = -g^-1 (dg) g^-1.
Field matrix_inv_entry(std::vector<Field> g, int n, int r, int c);

// Field-level tensor calculus on evaluated components (the classical
// operations applied after evaluation). Variance lists as in Bundle.
std::vector<Field> field_lie(const std::vector<Field>& X, const std::vector<Field>& s,
                             const std::vector<bool>& up, int n);
std::vector<Field> field_covderiv(const std::vector<Field>& gamma,
                                  const std::vector<Field>& X,
                                  const std::vector<Field>& s,
                                  const std::vector<bool>& up, int n);
std::vector<Field> field_curvature(const std::vector<Field>& gamma, int n);

}  // namespace gensec
