#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gensec/common.hpp"
#include "gensec/distribution.hpp"
#include "gensec/expr.hpp"
#include "gensec/field.hpp"

namespace gensec {

// Chart-to-chart coordinate change y = A x + b, row-major A. Every supported
// atlas (box, circle, torus, and the stretched test charts) changes
// coordinates affinely, which keeps inverses and Jacobians exact.
struct AffineMap {
  int n = 1;
  std::array<double, kMaxDim * kMaxDim> A{};
  std::array<double, kMaxDim> b{};

  static AffineMap identity(int n);
  static AffineMap translation(int n, const Pt& shift);

  Pt apply(const Pt& x) const;
  AffineMap inverse() const;                 // throws ConstructionError if singular
  AffineMap after(const AffineMap& g) const; // x -> this(g(x))
  double det() const;
  bool is_identity() const;
  // Image of an axis-aligned box; requires A to be axis-aligned (one nonzero
  // entry per row and column), which holds for every map this project builds.
  Box image(const Box& src) const;
  // The map as closed-form coordinate expressions y_r(x).
  std::vector<Expr> exprs() const;
  // e composed with this map.
  Expr substitute(const Expr& e) const;
};

// One branch of a chart transition: valid on src, acts by map.
struct TransComp {
  Box src;
  AffineMap map;
};

struct Transition {
  int from = -1, to = -1;
  std::vector<TransComp> comps;

  int comp_at(const Pt& x) const;  // index of the branch containing x, -1 if none
};

// Finite atlas of open boxes glued by per-branch affine transitions.
class ChartedManifold {
 public:
  ChartedManifold(int n, std::string id, std::vector<Box> charts,
                  std::vector<Transition> transitions);

  static std::shared_ptr<const ChartedManifold> box(const Box& b);
  static std::shared_ptr<const ChartedManifold> circle();
  static std::shared_ptr<const ChartedManifold> torus();
  // "circle", "torus", or "box a b [c d [e f]]".
  static std::shared_ptr<const ChartedManifold> named(const std::string& id);

  int n() const { return n_; }
  int charts() const { return int(charts_.size()); }
  const Box& chart_box(int i) const { return charts_[i]; }
  const std::string& id() const { return id_; }

  // nullptr when the charts do not meet (or i == j).
  const Transition* transition(int i, int j) const;
  // Chart-j coordinates of the chart-i point x; nullopt outside the overlap.
  std::optional<Pt> to_chart(int i, int j, const Pt& x) const;

  // Max over sample grids of |tau_ij(tau_ji x) - x| and, for chart triples,
  // |tau_kj(tau_ji x) - tau_ki x|.
  double cocycle_residual(int per_axis = 9) const;

 private:
  int n_;
  std::string id_;
  std::vector<Box> charts_;
  std::vector<Transition> transitions_;  // dense (i,j) order, overlapping pairs only
};

// Fiber transition matrices for a custom bundle: one m*m row-major expression
// list per branch of the base transition (from, to), as functions of the
// source chart point.
struct FiberMats {
  int from = -1, to = -1;
  std::vector<std::vector<Expr>> per_comp;
};

// Vector bundle over a charted manifold. Two kinds: mixed tensor powers of the
// tangent bundle, described by a per-slot variance list (true = contravariant),
// and generic bundles with user-supplied transition matrices. The trivial line
// bundle is the empty tensor power.
class Bundle {
 public:
  static std::shared_ptr<const Bundle> trivial(std::shared_ptr<const ChartedManifold> M,
                                               int m = 1);
  static std::shared_ptr<const Bundle> tangent(std::shared_ptr<const ChartedManifold> M);
  static std::shared_ptr<const Bundle> tensor(std::shared_ptr<const ChartedManifold> M,
                                              int r, int s);
  static std::shared_ptr<const Bundle> tensor_pattern(std::shared_ptr<const ChartedManifold> M,
                                                      std::vector<bool> up);
  static std::shared_ptr<const Bundle> generic(std::shared_ptr<const ChartedManifold> M, int m,
                                               std::vector<FiberMats> mats, std::string id);
  // "trivial m", "tangent", "tensor r s", "tensor# <pattern of u/d>".
  static std::shared_ptr<const Bundle> from_id(std::shared_ptr<const ChartedManifold> M,
                                               const std::string& id);

  // Slotwise variance flip for tensor bundles; inverse-transpose transitions
  // (built by adjugate, fiber dimension <= 3) for generic ones.
  std::shared_ptr<const Bundle> dual() const;

  const ChartedManifold& base() const { return *base_; }
  const std::shared_ptr<const ChartedManifold>& base_ptr() const { return base_; }
  int fiber_dim() const { return m_; }
  bool is_tensor() const { return is_tensor_; }
  const std::vector<bool>& variance() const;  // tensor bundles only
  const std::string& id() const { return id_; }

  // A_{ji}(x): components in chart j of the vector with components v in chart
  // i at x are A_{ji}(x) v. Row-major m x m; nullopt outside the overlap.
  std::optional<std::vector<double>> matrix_at(int i, int j, const Pt& x) const;
  // Same matrix as closed-form entries for one transition branch.
  const std::vector<Expr>& matrix_exprs(int i, int j, int comp) const;

  // Max entry defect of A_{ij}(tau x) A_{ji}(x) = id and the triple products.
  double cocycle_residual(int per_axis = 7) const;

 private:
  Bundle() = default;
  std::shared_ptr<const ChartedManifold> base_;
  int m_ = 1;
  bool is_tensor_ = true;
  std::vector<bool> up_;
  std::string id_;
  std::vector<FiberMats> mats_;  // one entry per overlapping ordered chart pair
};

// Section with closed-form per-chart components, compatible across overlaps.
class SmoothSection {
 public:
  SmoothSection(std::shared_ptr<const Bundle> E, std::vector<std::vector<Expr>> comps);
  static SmoothSection zero(std::shared_ptr<const Bundle> E);
  // Same scalar expression in every chart (valid when the expression is
  // invariant under the transitions, e.g. 2*pi-periodic on circle/torus).
  static SmoothSection scalar(std::shared_ptr<const ChartedManifold> M, const Expr& e);

  const Bundle& bundle() const { return *bundle_; }
  const std::shared_ptr<const Bundle>& bundle_ptr() const { return bundle_; }
  int m() const { return int(comps_[0].size()); }
  const Expr& comp(int chart, int k) const { return comps_[chart][k]; }
  const Field& comp_field(int chart, int k) const { return fields_[chart][k]; }
  std::vector<double> eval(int chart, const Pt& x) const;
  bool is_zero() const;

  SmoothSection operator+(const SmoothSection& o) const;
  SmoothSection operator-(const SmoothSection& o) const;
  SmoothSection scaled(double c) const;

  // sup over overlap grids of |s_j(tau x) - A_{ji}(x) s_i(x)|.
  double overlap_residual(int per_axis = 16) const;

  std::string serialize() const;
  static SmoothSection deserialize(const std::string& text);

 private:
  std::shared_ptr<const Bundle> bundle_;
  std::vector<std::vector<Expr>> comps_;    // [chart][fiber]
  std::vector<std::vector<Field>> fields_;  // cached evaluators
};

// Componentwise tensor product; variance lists concatenate.
SmoothSection tensor(const SmoothSection& a, const SmoothSection& b);
// Trace over one contravariant and one covariant slot.
SmoothSection contract(const SmoothSection& s, int up_slot, int down_slot);
// Coordinate Lie derivative of a tensor section along a vector field, all
// derivatives symbolic.
SmoothSection classical_lie(const SmoothSection& X, const SmoothSection& s);

// Connection on the tangent bundle and its tensor powers, given per chart by
// Christoffel coefficients Gamma^k_{ij}.
class SmoothConnection {
 public:
  // gamma[chart][(k*n + i)*n + j] = Gamma^k_{ij}
  SmoothConnection(std::shared_ptr<const ChartedManifold> M,
                   std::vector<std::vector<Expr>> gamma);
  static SmoothConnection flat(std::shared_ptr<const ChartedManifold> M);
  // Koszul formula applied to a metric (tensor 0 2 section); symbolic inverse
  // metric via adjugate over determinant.
  static SmoothConnection levi_civita(const SmoothSection& g);

  const ChartedManifold& base() const { return *base_; }
  const std::shared_ptr<const ChartedManifold>& base_ptr() const { return base_; }
  const Expr& christoffel(int chart, int k, int i, int j) const;
  // Gamma sampled over a compact: grid-point major, then (k,i,j) row-major.
  std::vector<double> christoffel_grid(int chart, const Box& K, int per_axis = 64) const;

  // Defect of the Christoffel transformation law across charts. The atlas
  // maps are affine, so the inhomogeneous Hessian term vanishes.
  double transformation_residual(int per_axis = 16) const;

 private:
  std::shared_ptr<const ChartedManifold> base_;
  std::vector<std::vector<Expr>> gamma_;
};

// (nabla_X s)^K = X^i d_i s^K + Gamma-corrections per slot; X a tangent
// section, s any tensor section.
SmoothSection classical_covderiv(const SmoothConnection& conn, const SmoothSection& X,
                                 const SmoothSection& s);
// R^l_{kij} = d_i Gamma^l_{jk} - d_j Gamma^l_{ik} + Gamma^l_{im} Gamma^m_{jk}
//           - Gamma^l_{jm} Gamma^m_{ik}; slots (l, k, i, j).
SmoothSection classical_curvature(const SmoothConnection& conn);
// g^{kj} R^i_{kij} as a scalar section.
SmoothSection scalar_curvature(const SmoothConnection& conn, const SmoothSection& g);

// Section whose per-chart components are symbolic distributions; overlap
// compatibility holds weakly, under the pairing.
class DistributionalSection {
 public:
  DistributionalSection(std::shared_ptr<const Bundle> E,
                        std::vector<std::vector<Distribution>> comps);
  static DistributionalSection zero(std::shared_ptr<const Bundle> E);
  static DistributionalSection from_smooth(const SmoothSection& s);

  const Bundle& bundle() const { return *bundle_; }
  const std::shared_ptr<const Bundle>& bundle_ptr() const { return bundle_; }
  int m() const { return int(comps_[0].size()); }
  const Distribution& comp(int chart, int k) const { return comps_[chart][k]; }
  int order() const;

  // Max pairing defect |<u_j, psi> - <u_i, A_{ji} (psi o tau)>| over
  // auto-generated window witnesses on each overlap branch.
  double overlap_residual(int witnesses_per_comp = 3, double quad_tol = 1e-10) const;

  std::string serialize() const;
  static DistributionalSection deserialize(const std::string& text);

 private:
  std::shared_ptr<const Bundle> bundle_;
  std::vector<std::vector<Distribution>> comps_;  // [chart][fiber]
};

}  // namespace gensec
