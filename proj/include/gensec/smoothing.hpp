#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gensec/common.hpp"
#include "gensec/distribution.hpp"
#include "gensec/field.hpp"
#include "gensec/geometry.hpp"
#include "gensec/mollifier.hpp"

namespace gensec {

// One scalar entry of an operator net: an eps-indexed linear map sending
// distributions on `domain` to smooth functions, local with radius
// support_radius(eps) = eps * support_radius(1). Concrete kinds (kernel
// pairing, zero, windowed sums, conjugations) live in the implementation;
// they are produced by the factories and operations below.
class ScalarOpNet {
 public:
  virtual ~ScalarOpNet() = default;

  // x -> (Phi_eps u)(x) with structural derivatives (taken on the kernel under
  // the pairing, or shifted onto the density where u is locally smooth).
  virtual Field act(double eps, const Distribution& u) const = 0;
  virtual const Box& domain() const = 0;
  virtual double support_radius(double eps) const = 0;
  virtual bool zero_class() const = 0;
  // Largest eps for which every pairing needed on the compact K stays inside
  // the relevant domains; +inf when unconstrained.
  virtual double eps_cap(const Box& K) const = 0;
  // Threshold below which windowed composites collapse to their plain
  // constituents on K (all input windows identically 1 across every kernel
  // support box). Evaluations are then bitwise equal to the unwindowed net.
  virtual double eps_exact(const Box& K) const { return eps_cap(K); }
  virtual std::string id() const = 0;
};

using ScalarOpPtr = std::shared_ptr<const ScalarOpNet>;

// Smooth two-point function a(x, y) in separated form sum_r g_r(x) h_r(y).
struct TwoPoint {
  std::vector<std::pair<Expr, Expr>> terms;

  static TwoPoint constant(double c);
  double eval(const Pt& x, const Pt& y) const;
};

ScalarOpPtr kernel_op(const Mollifier& rho, const Box& domain);
ScalarOpPtr zero_op(int n, const Box& domain);
// u -> [x -> <u, a(x,.) kernel_eps(x,.)>]. Classified as a 0-net when
// a(x, x) == 0 (checked on a grid), as a test-object entry when a(x, x) == 1.
ScalarOpPtr transport_op(const Mollifier& rho, const Box& domain, const TwoPoint& a);
ScalarOpPtr scaled_sum_op(const std::vector<double>& c, const std::vector<ScalarOpPtr>& kids);
// g(x) * S(u)(x).
ScalarOpPtr left_mul_op(const Field& g, ScalarOpPtr kid);
// S(g * u): multiplication on the input, same domain.
ScalarOpPtr pre_mul_op(const Field& g, ScalarOpPtr kid);
ScalarOpPtr out_deriv_op(int axis, ScalarOpPtr kid);
// S(L_X u) with the scalar Lie derivative X . grad on the input.
ScalarOpPtr pre_lie_op(const std::vector<Field>& X, ScalarOpPtr kid);

// Bump pair for one partition member: chi (the output weight) is supported in
// chi_support with plateau chi_plateau; theta (the input window) is 1 on
// theta_plateau which must contain chi_support. Whole-box entries mean "no
// window on that side".
struct PartitionPiece {
  Box chi_plateau, chi_support;
  Box theta_plateau, theta_support;
};

struct PartitionSpec {
  std::string name;
  std::vector<PartitionPiece> pieces;

  static PartitionSpec trivial(int n);
  // Cover of V by overlapping axis-aligned slabs cut at the given interior
  // points; windows widen by `overlap` into the neighbours and thetas pad the
  // chi supports by `pad` (all inside U).
  static PartitionSpec slabs(const Box& V, int axis, const std::vector<double>& cuts,
                             double overlap, double pad, const std::string& name);

  std::string serialize() const;
  static PartitionSpec deserialize(const std::string& text);
};

// Declared-grid application result. comp carries closed-form derivatives, so
// samples of any d^alpha are available without finite differences.
struct SmoothSample {
  double eps = 0;
  Box K;
  int per_axis = 0;
  std::vector<Pt> pts;
  std::vector<Field> comp;

  std::vector<double> values(int k, const MIdx& alpha = midx0()) const;
};

// Identity record of a net: which mollifier, which chart cover, which
// partition, at which moment order and support radius.
struct NetMeta {
  int q = 0;
  double r0 = 1.0;
  bool zero_class = false;
  std::string mollifier_id = "-", cover_id = "-", partition_id = "-";
};

// m x m matrix of scalar entries over one chart domain. Diagonal entries of a
// test-object net converge to the identity; off-diagonal entries (and every
// entry of a 0-net) converge to zero. Action on a vector distribution is
// (Phi u)^i = sum_j Phi_ij(u^j).
class VectorOpNet {
 public:
  VectorOpNet(const Box& domain, int m, std::vector<ScalarOpPtr> entries, NetMeta meta);

  // Diagonal mollifier-kernel net, zero off-diagonals.
  static VectorOpNet mollifier_net(const Mollifier& rho, const Box& domain, int m = 1);
  // Kernel net with transport multipliers A(x,y), A(x,x) = id (checked).
  static VectorOpNet transport_net(const Mollifier& rho, const Box& domain,
                                   const std::vector<TwoPoint>& A, int m);

  int n() const { return domain_.n; }
  int m() const { return m_; }
  const Box& domain() const { return domain_; }
  int q() const { return meta_.q; }
  double r0() const { return meta_.r0; }
  bool zero_class() const { return meta_.zero_class; }
  const NetMeta& meta() const { return meta_; }
  const ScalarOpPtr& entry(int i, int j) const { return entries_[i * m_ + j]; }

  double support_radius(double eps) const;
  double eps_cap(const Box& K) const;
  double eps_exact(const Box& K) const;
  // Largest grid power 2^-k (k from 1 upward) usable on K, capped at hi_pow.
  // This is the computed eps0 of the eventual-agreement statements.
  double dyadic_eps0(const Box& K, int hi_pow = 20) const;

  std::vector<Field> act(double eps, const std::vector<Distribution>& u) const;
  Field act1(double eps, const Distribution& u) const;

  // Checks that K padded by the support radius stays inside the domain; the
  // error says to shrink eps or K.
  SmoothSample apply(double eps, const std::vector<Distribution>& u, const Box& K,
                     int per_axis = 33) const;

  // Identity record: mollifier id, cover id, partition id, q, r0.
  std::string identity() const;
  std::string serialize() const;
  static VectorOpNet deserialize(const std::string& text);

 private:
  Box domain_;
  int m_ = 1;
  std::vector<ScalarOpPtr> entries_;
  NetMeta meta_;
  std::optional<Mollifier> moll_;  // set when the net is a plain kernel net
};

// f . Phi: multiply the output section by a smooth function.
VectorOpNet module_mul(const Field& f, const VectorOpNet& phi);
VectorOpNet net_lin_comb(double ca, const VectorOpNet& a, double cb, const VectorOpNet& b);

// L^SO_X Phi = L_X . Phi - Phi . L_X. coeff is the m x m matrix C of the
// variance correction in (L_X s)^i = X . grad s^i + sum_j C_ij s^j; empty
// means scalar components (C = 0). The result is a 0-net.
VectorOpNet lie_so(const std::vector<Field>& X, const VectorOpNet& phi,
                   const std::vector<std::vector<Field>>& coeff = {});

// Restriction to V <= U: u -> sum_W chi_W . Phi(u theta_W)|_V. Validates the
// partition (subordination and summing to 1 on a grid, tolerance 1e-10).
// Module multiplications are hoisted through restriction, which makes
// restrict_so(module_mul(f, phi)) == module_mul(f, restrict_so(phi)) exact.
VectorOpNet restrict_so(const VectorOpNet& phi, const Box& V, const PartitionSpec& spec);

// Gluing over a cover of U: u -> sum_l chi_l . Phi^l(u|_{U_l}). chi windows
// are (plateau, support) pairs subordinate to the cover; q of the result is
// the minimum of the constituents'.
VectorOpNet glue_so(const std::vector<Box>& cover, const std::vector<VectorOpNet>& nets,
                    const std::vector<std::pair<Box, Box>>& chi, const Box& U,
                    const std::string& partition_name = "glue");

// Bundle isomorphism over an affine diffeomorphism tau: from -> to, with a
// fiberwise matrix A(x) (old frame to new frame, expressed in old
// coordinates). fiber empty means the identity; otherwise fiber_inv must be
// supplied and A . A^-1 = id is checked on a grid.
struct BundleIso {
  AffineMap map;
  Box from, to;
  int m = 1;
  std::vector<Expr> fiber, fiber_inv;

  static BundleIso translation(const Box& from, const Pt& shift, int m = 1);
  static BundleIso linear(const Box& from, double scale, int m = 1);
};

// (mu_* Phi)(u) = mu_*(Phi(mu^* u)).
VectorOpNet pushforward_so(const BundleIso& mu, const VectorOpNet& phi);

// mu^* u for affine tau: new_domain -> u's domain; identification of
// distributions with functions by chart Lebesgue measure, so
// <mu^* u, psi> = |det D tau|^{-1} <u, psi o tau^{-1}>. Exact on the zoo.
Distribution affine_pullback(const Distribution& u, const AffineMap& tau,
                             const Box& new_domain);

}  // namespace gensec
