#include "gensec/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <utility>

#include "gensec/errors.hpp"
#include "gensec/quadrature.hpp"
#include "gensec/text.hpp"

namespace gensec {
namespace {

std::string fmt_g(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_box(const Box& b) {
  std::string s;
  for (int i = 0; i < b.n; ++i) {
    if (i) s += " ; ";
    s += fmt_g(b.lo[i]) + " " + fmt_g(b.hi[i]);
  }
  return s;
}

Box parse_box(const std::string& s, int line) {
  auto parts = split_list(s, ';');
  if (parts.empty() || int(parts.size()) > kMaxDim)
    throw ConfigError("bad box '" + s + "'", line, 1);
  Box b;
  b.n = int(parts.size());
  for (int i = 0; i < b.n; ++i) {
    std::istringstream is(parts[i]);
    std::string a, c, extra;
    is >> a >> c;
    if (a.empty() || c.empty() || (is >> extra))
      throw ConfigError("bad box axis '" + parts[i] + "'", line, 1);
    b.lo[i] = parse_double(a, line);
    b.hi[i] = parse_double(c, line);
  }
  return b;
}

bool box_covers(const Box& outer, const Box& inner) {
  if (outer.n != inner.n) return false;
  for (int i = 0; i < outer.n; ++i)
    if (outer.lo[i] > inner.lo[i] || outer.hi[i] < inner.hi[i]) return false;
  return true;
}

bool box_same(const Box& a, const Box& b) {
  return box_covers(a, b) && box_covers(b, a);
}

bool box_whole(const Box& b) {
  for (int i = 0; i < b.n; ++i)
    if (std::isfinite(b.lo[i]) || std::isfinite(b.hi[i])) return false;
  return true;
}

// Bounded probe box for grid checks on possibly unbounded sets.
Box clip_box(const Box& b, double r = 8.0) {
  Box out = b;
  for (int i = 0; i < b.n; ++i) {
    if (!std::isfinite(out.lo[i])) out.lo[i] = -r;
    if (!std::isfinite(out.hi[i])) out.hi[i] = r;
    if (out.lo[i] > out.hi[i]) out.hi[i] = out.lo[i];
  }
  return out;
}

int check_grid(int n) { return n == 1 ? 41 : (n == 2 ? 13 : 7); }

std::vector<MIdx> submidx(const MIdx& g) {
  std::vector<MIdx> out;
  for (int a = 0; a <= g[0]; ++a)
    for (int b = 0; b <= g[1]; ++b)
      for (int c = 0; c <= g[2]; ++c) out.push_back(MIdx{a, b, c});
  return out;
}

// ---------------------------------------------------------------------------
// Pairing fields

// x -> <u, d^alpha_x kernel_eps(x, .)>. Where u is locally a smooth density,
// the x-derivatives are shifted onto the density (integration by parts inside
// the kernel box), which keeps the integrand at kernel scale eps^-n instead of
// eps^(-n-|alpha|).
class KernelField final : public FieldNode {
 public:
  std::shared_ptr<const KernelNet> net;
  double eps = 1;
  std::shared_ptr<const Distribution> u;
  MIdx alpha = midx0();

  double eval(const double* xr) const override {
    if (u->is_zero()) return 0.0;
    int n = net->rho.n;
    Pt x = pt0();
    for (int i = 0; i < n; ++i) x[i] = xr[i];
    if (order(alpha) > 0) {
      Box bx = net->support_box(eps, x);
      if (auto f = u->local_density(bx)) {
        Field g = f->d(alpha);
        if (g.is_zero()) return 0.0;
        TestFn k = net->kernel(eps, x, midx0());
        return integrate_panels(
            [&](const double* y) { return g.eval(y) * k.f.eval(y); }, k.support,
            k.gl_order, k.gl_panels);
      }
    }
    return u->pair(net->kernel(eps, x, alpha));
  }

  Field deriv(int axis) const override {
    auto d = std::make_shared<KernelField>(*this);
    ++d->alpha[axis];
    return Field(d);
  }
};

// x -> <u, a(x, .) kernel_eps(x, .)> with separated a = sum_r g_r(x) h_r(y).
class TransportField final : public FieldNode {
 public:
  std::shared_ptr<const KernelNet> net;
  double eps = 1;
  std::shared_ptr<const Distribution> u;
  TwoPoint a;
  MIdx gamma = midx0();

  double eval(const double* xr) const override {
    if (u->is_zero()) return 0.0;
    int n = net->rho.n;
    Pt x = pt0();
    for (int i = 0; i < n; ++i) x[i] = xr[i];
    double total = 0.0;
    for (const MIdx& k : submidx(gamma)) {
      double bin = midx_binom(gamma, k);
      TestFn ker = net->kernel(eps, x, gamma - k);
      for (const auto& t : a.terms) {
        double gv = t.first.diff(k).eval(x);
        if (gv == 0.0) continue;
        TestFn psi{Field::product({Field::from_expr(t.second), ker.f}),
                   ker.support, ker.gl_order, ker.gl_panels};
        total += bin * gv * u->pair(psi);
      }
    }
    return total;
  }

  Field deriv(int axis) const override {
    auto d = std::make_shared<TransportField>(*this);
    ++d->gamma[axis];
    return Field(d);
  }
};

// d^gamma of sum_i chi_i v_i where supp chi_i is known and sum chi_i == 1 on
// the union. Pieces whose raw window vanishes at x are skipped entirely (their
// windows vanish to all orders there). When every active piece agrees at every
// Leibniz level the sum collapses to the common value: the chi sum to 1 and
// their derivatives to 0 identically, so returning the shared constituent
// value is exact and in particular introduces no floating point drift.
class CollapseNode final : public FieldNode {
 public:
  std::vector<Field> chi, w, v;
  MIdx gamma = midx0();

  CollapseNode(std::vector<Field> chi_, std::vector<Field> w_,
               std::vector<Field> v_, const MIdx& g)
      : chi(std::move(chi_)), w(std::move(w_)), v(std::move(v_)), gamma(g) {}

  double eval(const double* x) const override {
    std::vector<int> act;
    for (size_t i = 0; i < w.size(); ++i)
      if (w[i].eval(x) != 0.0) act.push_back(int(i));
    if (act.empty()) return 0.0;
    auto levels = submidx(gamma);
    bool common = true;
    double head = 0.0;
    for (const MIdx& lev : levels) {
      double first = v[size_t(act[0])].d(lev).eval(x);
      for (size_t j = 1; j < act.size() && common; ++j)
        if (v[size_t(act[j])].d(lev).eval(x) != first) common = false;
      if (!common) break;
      if (lev == gamma) head = first;
    }
    if (common) return head;
    double s = 0.0;
    for (int i : act)
      for (const MIdx& k : levels)
        s += midx_binom(gamma, k) * chi[size_t(i)].d(k).eval(x) *
             v[size_t(i)].d(gamma - k).eval(x);
    return s;
  }

  Field deriv(int axis) const override {
    auto d = std::make_shared<CollapseNode>(*this);
    ++d->gamma[axis];
    return Field(d);
  }
};

// ---------------------------------------------------------------------------
// Scalar node kinds

class KernelOp final : public ScalarOpNet {
 public:
  std::shared_ptr<const KernelNet> net;
  Box dom;

  KernelOp(const Mollifier& rho, const Box& d)
      : net(std::make_shared<KernelNet>(rho)), dom(d) {}

  Field act(double eps, const Distribution& u) const override {
    auto f = std::make_shared<KernelField>();
    f->net = net;
    f->eps = eps;
    f->u = std::make_shared<Distribution>(u);
    return Field(f);
  }
  const Box& domain() const override { return dom; }
  double support_radius(double eps) const override { return eps * net->rho.r0; }
  bool zero_class() const override { return false; }
  double eps_cap(const Box& K) const override {
    Box Kc = K.intersect(dom);
    if (Kc.empty()) return kInf;
    double m = Kc.margin_inside(dom);
    if (m == kInf) return kInf;
    if (m <= 0) return 0.0;
    return m / net->rho.r0;
  }
  std::string id() const override {
    return "kernel " + net->rho.base + " q" + std::to_string(net->rho.q);
  }
};

class ZeroOp final : public ScalarOpNet {
 public:
  Box dom;

  explicit ZeroOp(const Box& d) : dom(d) {}

  Field act(double, const Distribution&) const override { return Field(); }
  const Box& domain() const override { return dom; }
  double support_radius(double) const override { return 0.0; }
  bool zero_class() const override { return true; }
  double eps_cap(const Box&) const override { return kInf; }
  std::string id() const override { return "zero"; }
};

class TransportOp final : public ScalarOpNet {
 public:
  std::shared_ptr<const KernelNet> net;
  Box dom;
  TwoPoint a;
  bool zero_class_ = false;

  Field act(double eps, const Distribution& u) const override {
    auto f = std::make_shared<TransportField>();
    f->net = net;
    f->eps = eps;
    f->u = std::make_shared<Distribution>(u);
    f->a = a;
    return Field(f);
  }
  const Box& domain() const override { return dom; }
  double support_radius(double eps) const override { return eps * net->rho.r0; }
  bool zero_class() const override { return zero_class_; }
  double eps_cap(const Box& K) const override {
    Box Kc = K.intersect(dom);
    if (Kc.empty()) return kInf;
    double m = Kc.margin_inside(dom);
    if (m == kInf) return kInf;
    if (m <= 0) return 0.0;
    return m / net->rho.r0;
  }
  std::string id() const override { return "transport"; }
};

class ScaledSumOp final : public ScalarOpNet {
 public:
  std::vector<double> c;
  std::vector<ScalarOpPtr> kids;

  Field act(double eps, const Distribution& u) const override {
    std::vector<Field> terms;
    terms.reserve(kids.size());
    for (size_t i = 0; i < kids.size(); ++i)
      terms.push_back(Field::scale(c[i], kids[i]->act(eps, u)));
    return Field::sum(std::move(terms));
  }
  const Box& domain() const override { return kids.front()->domain(); }
  double support_radius(double eps) const override {
    double r = 0;
    for (const auto& k : kids) r = std::max(r, k->support_radius(eps));
    return r;
  }
  bool zero_class() const override {
    for (const auto& k : kids)
      if (!k->zero_class()) return false;
    return true;
  }
  double eps_cap(const Box& K) const override {
    double e = kInf;
    for (const auto& k : kids) e = std::min(e, k->eps_cap(K));
    return e;
  }
  double eps_exact(const Box& K) const override {
    double e = kInf;
    for (const auto& k : kids) e = std::min(e, k->eps_exact(K));
    return e;
  }
  std::string id() const override { return "sum/" + std::to_string(kids.size()); }
};

class LeftMulOp final : public ScalarOpNet {
 public:
  Field g;
  ScalarOpPtr kid;

  Field act(double eps, const Distribution& u) const override {
    Field f = kid->act(eps, u);
    if (f.is_zero()) return f;
    return Field::product({g, f});
  }
  const Box& domain() const override { return kid->domain(); }
  double support_radius(double eps) const override { return kid->support_radius(eps); }
  bool zero_class() const override { return kid->zero_class(); }
  double eps_cap(const Box& K) const override { return kid->eps_cap(K); }
  double eps_exact(const Box& K) const override { return kid->eps_exact(K); }
  std::string id() const override { return "lmul(" + kid->id() + ")"; }
};

class PreMulOp final : public ScalarOpNet {
 public:
  Field g;
  ScalarOpPtr kid;

  Field act(double eps, const Distribution& u) const override {
    return kid->act(eps, u.mul(g));
  }
  const Box& domain() const override { return kid->domain(); }
  double support_radius(double eps) const override { return kid->support_radius(eps); }
  bool zero_class() const override { return kid->zero_class(); }
  double eps_cap(const Box& K) const override { return kid->eps_cap(K); }
  double eps_exact(const Box& K) const override { return kid->eps_exact(K); }
  std::string id() const override { return "pmul(" + kid->id() + ")"; }
};

class OutDerivOp final : public ScalarOpNet {
 public:
  int axis = 0;
  ScalarOpPtr kid;

  Field act(double eps, const Distribution& u) const override {
    return kid->act(eps, u).d(axis);
  }
  const Box& domain() const override { return kid->domain(); }
  double support_radius(double eps) const override { return kid->support_radius(eps); }
  bool zero_class() const override { return kid->zero_class(); }
  double eps_cap(const Box& K) const override { return kid->eps_cap(K); }
  double eps_exact(const Box& K) const override { return kid->eps_exact(K); }
  std::string id() const override { return "d" + std::to_string(axis) + "(" + kid->id() + ")"; }
};

class PreLieOp final : public ScalarOpNet {
 public:
  std::vector<Field> X;
  ScalarOpPtr kid;

  Field act(double eps, const Distribution& u) const override {
    return kid->act(eps, u.lie(X));
  }
  const Box& domain() const override { return kid->domain(); }
  double support_radius(double eps) const override { return kid->support_radius(eps); }
  bool zero_class() const override { return kid->zero_class(); }
  double eps_cap(const Box& K) const override { return kid->eps_cap(K); }
  double eps_exact(const Box& K) const override { return kid->eps_exact(K); }
  std::string id() const override { return "plie(" + kid->id() + ")"; }
};

// One member of a windowed sum: output weight w (unnormalized), an optional
// input window theta (restriction) or input clip box (gluing), and the
// constituent acting on the transformed input.
struct PieceRT {
  Field w;
  Box w_support;
  std::optional<Field> theta;
  Box theta_plateau;
  std::optional<Box> clip;
  ScalarOpPtr kid;
};

class WindowedSumOp final : public ScalarOpNet {
 public:
  Box dom;
  std::vector<PieceRT> pieces;
  std::vector<Field> chi, raw;
  std::string name;

  WindowedSumOp(const Box& d, std::vector<PieceRT> ps, std::string nm)
      : dom(d), pieces(std::move(ps)), name(std::move(nm)) {
    for (const auto& p : pieces) raw.push_back(p.w);
    Field S = Field::sum(raw);
    Field rs = Field::recip(S);
    for (const auto& p : pieces) chi.push_back(Field::product({p.w, rs}));
  }

  Field act(double eps, const Distribution& u) const override {
    std::vector<Field> vals;
    vals.reserve(pieces.size());
    for (const auto& p : pieces) {
      Distribution t = u;
      if (p.theta) {
        t = t.mul(*p.theta);
        if (!box_same(t.domain(), p.kid->domain())) {
          // Chained restrictions hand inputs living on the parent box to a
          // constituent on a smaller one.  The window has already cut the
          // input down to what the constituent can see, so dropping the
          // rest is lossless; in the other direction extend the box.
          t = box_covers(p.kid->domain(), t.domain())
                  ? t.with_domain(p.kid->domain())
                  : t.restricted(p.kid->domain());
        }
      }
      if (p.clip) t = t.restricted(*p.clip);
      vals.push_back(p.kid->act(eps, t));
    }
    return Field(std::make_shared<CollapseNode>(chi, raw, std::move(vals), midx0()));
  }
  const Box& domain() const override { return dom; }
  double support_radius(double eps) const override {
    double r = 0;
    for (const auto& p : pieces) r = std::max(r, p.kid->support_radius(eps));
    return r;
  }
  bool zero_class() const override {
    for (const auto& p : pieces)
      if (!p.kid->zero_class()) return false;
    return true;
  }
  double eps_cap(const Box& K) const override {
    double e = kInf;
    for (const auto& p : pieces) {
      Box Ki = K.intersect(p.w_support);
      if (Ki.empty()) continue;
      e = std::min(e, p.kid->eps_cap(Ki));
    }
    return e;
  }
  double eps_exact(const Box& K) const override {
    double e = kInf;
    for (const auto& p : pieces) {
      Box Ki = K.intersect(p.w_support);
      if (Ki.empty()) continue;
      double rad = p.kid->support_radius(1.0);
      if (p.theta) {
        double m = Ki.margin_inside(p.theta_plateau);
        if (m <= 0) return 0.0;
        if (rad > 0 && m < kInf) e = std::min(e, m / rad);
      }
      if (p.clip) {
        double m = Ki.margin_inside(*p.clip);
        if (m <= 0) return 0.0;
        if (rad > 0 && m < kInf) e = std::min(e, m / rad);
      }
      e = std::min(e, p.kid->eps_exact(Ki));
    }
    return e;
  }
  std::string id() const override {
    return "windowed " + name + "/" + std::to_string(pieces.size());
  }
};

// Conjugation by an affine chart map: act = push o kid o pull, with an
// optional fiber multiplier applied to the pulled-back input.
class ConjOp final : public ScalarOpNet {
 public:
  AffineMap tau;  // kid domain -> dom
  AffineMap inv;  // dom -> kid domain
  Box dom;
  std::vector<Expr> inv_exprs;
  std::optional<Field> pre;
  ScalarOpPtr kid;
  double amp = 1;  // bound on how tau stretches lengths

  Field act(double eps, const Distribution& u) const override {
    Distribution pu = affine_pullback(u, tau, kid->domain());
    if (pre) pu = pu.mul(*pre);
    return Field::compose(kid->act(eps, pu), inv_exprs);
  }
  const Box& domain() const override { return dom; }
  double support_radius(double eps) const override {
    return amp * kid->support_radius(eps);
  }
  bool zero_class() const override { return kid->zero_class(); }
  double eps_cap(const Box& K) const override {
    return kid->eps_cap(pull_box(K));
  }
  double eps_exact(const Box& K) const override {
    return kid->eps_exact(pull_box(K));
  }
  std::string id() const override { return "conj(" + kid->id() + ")"; }

 private:
  Box pull_box(const Box& K) const {
    Box Kc = clip_box(K.intersect(dom));
    int n = Kc.n;
    Box out;
    out.n = n;
    for (int i = 0; i < n; ++i) {
      out.lo[i] = kInf;
      out.hi[i] = -kInf;
    }
    for (int mask = 0; mask < (1 << n); ++mask) {
      Pt c = pt0();
      for (int i = 0; i < n; ++i) c[i] = (mask >> i & 1) ? Kc.hi[i] : Kc.lo[i];
      Pt y = inv.apply(c);
      for (int i = 0; i < n; ++i) {
        out.lo[i] = std::min(out.lo[i], y[i]);
        out.hi[i] = std::max(out.hi[i], y[i]);
      }
    }
    return out;
  }
};

bool exactly_one(const TwoPoint& a) {
  double s = 0;
  for (const auto& t : a.terms) {
    double cg = 0, ch = 0;
    if (!t.first.is_const(&cg) || !t.second.is_const(&ch)) return false;
    s += cg * ch;
  }
  return s == 1.0;
}

// Exact image of a box under an axis-aligned affine map (one nonzero entry
// per row); handles unbounded sides. nullopt when the map mixes axes.
std::optional<Box> axis_image(const AffineMap& t, const Box& src) {
  int n = src.n;
  Box out;
  out.n = n;
  for (int r = 0; r < n; ++r) {
    int nz = -1;
    for (int c = 0; c < n; ++c)
      if (t.A[r * kMaxDim + c] != 0.0) {
        if (nz >= 0) return std::nullopt;
        nz = c;
      }
    if (nz < 0) return std::nullopt;
    double a = t.A[r * kMaxDim + nz];
    double v1 = a * src.lo[nz] + t.b[r];
    double v2 = a * src.hi[nz] + t.b[r];
    out.lo[r] = std::min(v1, v2);
    out.hi[r] = std::max(v1, v2);
  }
  return out;
}

// Coefficients of Prod_j (sum_k B_kj d_k)^(gamma_j) with B = inv.A: how a
// y-derivative multi-index decomposes over x-derivatives after the affine
// change of variables.
std::vector<std::pair<MIdx, double>> expand_derivs(const AffineMap& inv,
                                                   const MIdx& gamma, int n) {
  std::map<MIdx, double> acc;
  acc[midx0()] = 1.0;
  for (int j = 0; j < n; ++j)
    for (int rep = 0; rep < gamma[j]; ++rep) {
      std::map<MIdx, double> nxt;
      for (const auto& [d, c] : acc)
        for (int k = 0; k < n; ++k) {
          double bkj = inv.A[k * kMaxDim + j];
          if (bkj == 0.0) continue;
          MIdx d2 = d;
          ++d2[k];
          nxt[d2] += c * bkj;
        }
      acc = std::move(nxt);
    }
  return {acc.begin(), acc.end()};
}

std::string moll_id(const Mollifier& rho) {
  return rho.base + " n" + std::to_string(rho.n) + " q" + std::to_string(rho.q) +
         " r0 " + fmt_g(rho.r0);
}

}  // namespace

// ---------------------------------------------------------------------------
// TwoPoint

TwoPoint TwoPoint::constant(double c) {
  TwoPoint a;
  a.terms.push_back({Expr(c), Expr(1.0)});
  return a;
}

double TwoPoint::eval(const Pt& x, const Pt& y) const {
  double s = 0;
  for (const auto& t : terms) s += t.first.eval(x) * t.second.eval(y);
  return s;
}

// ---------------------------------------------------------------------------
// Scalar factories

ScalarOpPtr kernel_op(const Mollifier& rho, const Box& domain) {
  if (rho.n != domain.n)
    throw ConstructionError("mollifier dimension " + std::to_string(rho.n) +
                            " vs domain dimension " + std::to_string(domain.n));
  return std::make_shared<KernelOp>(rho, domain);
}

ScalarOpPtr zero_op(int n, const Box& domain) {
  if (n != domain.n) throw ConstructionError("zero_op dimension mismatch");
  return std::make_shared<ZeroOp>(domain);
}

ScalarOpPtr transport_op(const Mollifier& rho, const Box& domain, const TwoPoint& a) {
  if (rho.n != domain.n)
    throw ConstructionError("mollifier dimension " + std::to_string(rho.n) +
                            " vs domain dimension " + std::to_string(domain.n));
  if (exactly_one(a)) return kernel_op(rho, domain);
  bool all0 = true, all1 = true;
  Box probe = clip_box(domain);
  for (const Pt& x : grid_points(probe, check_grid(domain.n))) {
    double v = a.eval(x, x);
    if (std::abs(v) > 1e-12) all0 = false;
    if (std::abs(v - 1.0) > 1e-12) all1 = false;
  }
  if (!all0 && !all1)
    throw ConstructionError(
        "transport multiplier a(x,x) is neither identically 0 nor identically "
        "1 on the chart; cannot classify the entry");
  auto op = std::make_shared<TransportOp>();
  op->net = std::make_shared<KernelNet>(rho);
  op->dom = domain;
  op->a = a;
  op->zero_class_ = all0;
  return op;
}

ScalarOpPtr scaled_sum_op(const std::vector<double>& c,
                          const std::vector<ScalarOpPtr>& kids) {
  if (c.size() != kids.size() || kids.empty())
    throw ConstructionError("scaled_sum_op needs matching nonempty coefficient "
                            "and constituent lists");
  for (const auto& k : kids)
    if (!box_same(k->domain(), kids.front()->domain()))
      throw ConstructionError("scaled_sum_op constituents live on different domains");
  if (kids.size() == 1 && c[0] == 1.0) return kids[0];
  auto op = std::make_shared<ScaledSumOp>();
  op->c = c;
  op->kids = kids;
  return op;
}

ScalarOpPtr left_mul_op(const Field& g, ScalarOpPtr kid) {
  if (dynamic_cast<const ZeroOp*>(kid.get())) return kid;
  auto op = std::make_shared<LeftMulOp>();
  op->g = g;
  op->kid = std::move(kid);
  return op;
}

ScalarOpPtr pre_mul_op(const Field& g, ScalarOpPtr kid) {
  auto op = std::make_shared<PreMulOp>();
  op->g = g;
  op->kid = std::move(kid);
  return op;
}

ScalarOpPtr out_deriv_op(int axis, ScalarOpPtr kid) {
  if (axis < 0 || axis >= kid->domain().n)
    throw ConstructionError("derivative axis " + std::to_string(axis) +
                            " out of range");
  auto op = std::make_shared<OutDerivOp>();
  op->axis = axis;
  op->kid = std::move(kid);
  return op;
}

ScalarOpPtr pre_lie_op(const std::vector<Field>& X, ScalarOpPtr kid) {
  if (int(X.size()) != kid->domain().n)
    throw ConstructionError("pre_lie_op needs one vector component per axis");
  auto op = std::make_shared<PreLieOp>();
  op->X = X;
  op->kid = std::move(kid);
  return op;
}

// ---------------------------------------------------------------------------
// PartitionSpec

PartitionSpec PartitionSpec::trivial(int n) {
  PartitionSpec s;
  s.name = "trivial";
  PartitionPiece p;
  p.chi_plateau = p.chi_support = Box::whole(n);
  p.theta_plateau = p.theta_support = Box::whole(n);
  s.pieces.push_back(p);
  return s;
}

PartitionSpec PartitionSpec::slabs(const Box& V, int axis,
                                   const std::vector<double>& cuts,
                                   double overlap, double pad,
                                   const std::string& name) {
  int n = V.n;
  if (axis < 0 || axis >= n) throw ConstructionError("slab axis out of range");
  if (!(overlap > 0) || !(pad > 0))
    throw ConstructionError("slab overlap and pad must be positive");
  for (size_t i = 0; i < cuts.size(); ++i) {
    if (cuts[i] <= V.lo[axis] || cuts[i] >= V.hi[axis])
      throw ConstructionError("slab cut " + fmt_g(cuts[i]) +
                              " outside the target box " + V.str());
    if (i && cuts[i] - cuts[i - 1] <= 2 * overlap)
      throw ConstructionError("slab cuts closer than twice the overlap");
  }
  PartitionSpec s;
  s.name = name;
  int K = int(cuts.size()) + 1;
  for (int i = 0; i < K; ++i) {
    double lo = (i == 0) ? -kInf : cuts[size_t(i - 1)];
    double hi = (i == K - 1) ? kInf : cuts[size_t(i)];
    PartitionPiece p;
    p.chi_support = p.chi_plateau = Box::whole(n);
    p.chi_support.n = p.chi_plateau.n = n;
    p.chi_support.lo[axis] = lo - overlap;
    p.chi_support.hi[axis] = hi + overlap;
    p.chi_plateau.lo[axis] = lo + overlap;
    p.chi_plateau.hi[axis] = hi - overlap;
    p.theta_plateau = Box::whole(n);
    p.theta_plateau.lo[axis] = p.chi_support.lo[axis] - pad;
    p.theta_plateau.hi[axis] = p.chi_support.hi[axis] + pad;
    p.theta_support = Box::whole(n);
    p.theta_support.lo[axis] = p.theta_plateau.lo[axis] - pad;
    p.theta_support.hi[axis] = p.theta_plateau.hi[axis] + pad;
    s.pieces.push_back(p);
  }
  return s;
}

std::string PartitionSpec::serialize() const {
  std::string out = "[partition]\nname = " + name +
                    "\npieces = " + std::to_string(pieces.size()) + "\n";
  for (size_t i = 0; i < pieces.size(); ++i) {
    const PartitionPiece& p = pieces[i];
    out += "[piece " + std::to_string(i) + "]\n";
    out += "chi_plateau = " + fmt_box(p.chi_plateau) + "\n";
    out += "chi_support = " + fmt_box(p.chi_support) + "\n";
    out += "theta_plateau = " + fmt_box(p.theta_plateau) + "\n";
    out += "theta_support = " + fmt_box(p.theta_support) + "\n";
  }
  return out;
}

PartitionSpec PartitionSpec::deserialize(const std::string& text) {
  auto secs = parse_sections(text);
  PartitionSpec s;
  int want = -1;
  for (const auto& sec : secs) {
    if (sec.name == "partition") {
      s.name = sec.get("name");
      want = parse_int(sec.get("pieces"), sec.line);
    } else if (sec.name.rfind("piece", 0) == 0) {
      PartitionPiece p;
      p.chi_plateau = parse_box(sec.get("chi_plateau"), sec.line);
      p.chi_support = parse_box(sec.get("chi_support"), sec.line);
      p.theta_plateau = parse_box(sec.get("theta_plateau"), sec.line);
      p.theta_support = parse_box(sec.get("theta_support"), sec.line);
      s.pieces.push_back(p);
    }
  }
  if (want < 0) throw ConfigError("no [partition] section");
  if (int(s.pieces.size()) != want)
    throw ConfigError("partition lists " + std::to_string(want) +
                      " pieces but has " + std::to_string(s.pieces.size()));
  return s;
}

// ---------------------------------------------------------------------------
// SmoothSample

std::vector<double> SmoothSample::values(int k, const MIdx& alpha) const {
  if (k < 0 || k >= int(comp.size()))
    throw ConstructionError("component index out of range");
  Field f = comp[size_t(k)].d(alpha);
  std::vector<double> out;
  out.reserve(pts.size());
  for (const Pt& p : pts) out.push_back(f.eval(p));
  return out;
}

// ---------------------------------------------------------------------------
// VectorOpNet

VectorOpNet::VectorOpNet(const Box& domain, int m, std::vector<ScalarOpPtr> entries,
                         NetMeta meta)
    : domain_(domain), m_(m), entries_(std::move(entries)), meta_(std::move(meta)) {
  if (m_ < 1) throw ConstructionError("fiber dimension must be at least 1");
  if (int(entries_.size()) != m_ * m_)
    throw ConstructionError("need m*m scalar entries, got " +
                            std::to_string(entries_.size()));
  for (const auto& e : entries_) {
    if (!e) throw ConstructionError("null scalar entry");
    if (!box_same(e->domain(), domain_))
      throw ConstructionError("entry domain " + e->domain().str() +
                              " differs from net domain " + domain_.str());
  }
}

VectorOpNet VectorOpNet::mollifier_net(const Mollifier& rho, const Box& domain, int m) {
  ScalarOpPtr k = kernel_op(rho, domain);
  ScalarOpPtr z = m > 1 ? zero_op(domain.n, domain) : nullptr;
  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) entries.push_back(i == j ? k : z);
  NetMeta meta;
  meta.q = rho.q;
  meta.r0 = rho.r0;
  meta.mollifier_id = moll_id(rho);
  meta.cover_id = "chart " + domain.str();
  VectorOpNet net(domain, m, std::move(entries), meta);
  net.moll_ = rho;
  return net;
}

VectorOpNet VectorOpNet::transport_net(const Mollifier& rho, const Box& domain,
                                       const std::vector<TwoPoint>& A, int m) {
  if (int(A.size()) != m * m)
    throw ConstructionError("transport_net needs an m x m multiplier matrix");
  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      ScalarOpPtr e = transport_op(rho, domain, A[size_t(i * m + j)]);
      if (i == j && e->zero_class())
        throw ConstructionError("transport diagonal multiplier vanishes on the "
                                "diagonal; the net cannot reproduce");
      if (i != j && !e->zero_class())
        throw ConstructionError("transport off-diagonal multiplier does not "
                                "vanish on the diagonal");
      entries.push_back(std::move(e));
    }
  NetMeta meta;
  meta.q = rho.q;
  meta.r0 = rho.r0;
  meta.mollifier_id = moll_id(rho) + " transport";
  meta.cover_id = "chart " + domain.str();
  return VectorOpNet(domain, m, std::move(entries), meta);
}

double VectorOpNet::support_radius(double eps) const {
  double r = 0;
  for (const auto& e : entries_) r = std::max(r, e->support_radius(eps));
  return r;
}

double VectorOpNet::eps_cap(const Box& K) const {
  double e = kInf;
  for (const auto& en : entries_) e = std::min(e, en->eps_cap(K));
  return e;
}

double VectorOpNet::eps_exact(const Box& K) const {
  double e = kInf;
  for (const auto& en : entries_) e = std::min(e, en->eps_exact(K));
  return e;
}

double VectorOpNet::dyadic_eps0(const Box& K, int hi_pow) const {
  double cap = std::min(eps_cap(K), eps_exact(K));
  for (int k = 1; k <= hi_pow; ++k) {
    double e = std::ldexp(1.0, -k);
    if (e <= cap) return e;
  }
  return 0.0;
}

std::vector<Field> VectorOpNet::act(double eps, const std::vector<Distribution>& u) const {
  if (!(eps > 0)) throw ConstructionError("eps must be positive");
  if (int(u.size()) != m_)
    throw ConstructionError("expected " + std::to_string(m_) +
                            " input components, got " + std::to_string(u.size()));
  for (const auto& c : u)
    if (c.n() != n())
      throw ConstructionError("input component dimension mismatch");
  std::vector<Field> out;
  out.reserve(size_t(m_));
  for (int i = 0; i < m_; ++i) {
    std::vector<Field> terms;
    for (int j = 0; j < m_; ++j)
      terms.push_back(entry(i, j)->act(eps, u[size_t(j)]));
    out.push_back(Field::sum(std::move(terms)));
  }
  return out;
}

Field VectorOpNet::act1(double eps, const Distribution& u) const {
  if (m_ != 1) throw ConstructionError("act1 needs a scalar net (m = 1)");
  return act(eps, {u})[0];
}

SmoothSample VectorOpNet::apply(double eps, const std::vector<Distribution>& u,
                                const Box& K, int per_axis) const {
  if (K.n != n()) throw ConstructionError("evaluation box dimension mismatch");
  if (!K.bounded())
    throw ConstructionError("apply needs a bounded evaluation box");
  if (!box_covers(domain_, K))
    throw EvalError("evaluation box " + K.str() + " leaves the chart domain " +
                    domain_.str());
  double cap = eps_cap(K);
  if (eps > cap)
    throw EvalError("eps " + fmt_g(eps) + " exceeds the validity cap " +
                    fmt_g(cap) + " on " + K.str() +
                    ": pairings would leave the domain; shrink eps or K");
  SmoothSample s;
  s.eps = eps;
  s.K = K;
  s.per_axis = per_axis;
  s.comp = act(eps, u);
  s.pts = grid_points(K, per_axis);
  return s;
}

std::string VectorOpNet::identity() const {
  std::string out = "[net]\n";
  out += "mollifier = " + meta_.mollifier_id + "\n";
  out += "cover = " + meta_.cover_id + "\n";
  out += "partition = " + meta_.partition_id + "\n";
  out += "q = " + std::to_string(meta_.q) + "\n";
  out += "r0 = " + fmt_g(meta_.r0) + "\n";
  out += "m = " + std::to_string(m_) + "\n";
  out += std::string("class = ") + (meta_.zero_class ? "zero" : "test") + "\n";
  return out;
}

std::string VectorOpNet::serialize() const {
  if (!moll_)
    throw ConstructionError(
        "only plain mollifier nets serialize; composite nets are runtime "
        "objects (serialize the mollifier and partition data instead)");
  std::string out = "[net]\nkind = mollifier\nm = " + std::to_string(m_) +
                    "\ndomain = " + fmt_box(domain_) + "\n";
  out += moll_->serialize();
  return out;
}

VectorOpNet VectorOpNet::deserialize(const std::string& text) {
  auto secs = parse_sections(text);
  const TextSection* s = nullptr;
  for (const auto& sec : secs)
    if (sec.name == "net") s = &sec;
  if (!s) throw ConfigError("no [net] section");
  if (s->get("kind") != "mollifier")
    throw ConfigError("unknown net kind '" + s->get("kind") + "'", s->line, 1);
  int m = parse_int(s->get("m"), s->line);
  Box domain = parse_box(s->get("domain"), s->line);
  Mollifier rho = Mollifier::deserialize(text);
  return mollifier_net(rho, domain, m);
}

// ---------------------------------------------------------------------------
// Operations

VectorOpNet module_mul(const Field& f, const VectorOpNet& phi) {
  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < phi.m(); ++i)
    for (int j = 0; j < phi.m(); ++j)
      entries.push_back(left_mul_op(f, phi.entry(i, j)));
  NetMeta meta = phi.meta();
  meta.cover_id = "mul(" + meta.cover_id + ")";
  return VectorOpNet(phi.domain(), phi.m(), std::move(entries), meta);
}

VectorOpNet net_lin_comb(double ca, const VectorOpNet& a, double cb,
                         const VectorOpNet& b) {
  if (a.m() != b.m() || !box_same(a.domain(), b.domain()))
    throw ConstructionError("net_lin_comb needs matching fiber and domain");
  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < a.m(); ++i)
    for (int j = 0; j < a.m(); ++j)
      entries.push_back(scaled_sum_op({ca, cb}, {a.entry(i, j), b.entry(i, j)}));
  NetMeta meta = a.meta();
  meta.q = std::min(a.q(), b.q());
  meta.r0 = std::max(a.r0(), b.r0());
  meta.zero_class = a.zero_class() && b.zero_class();
  if (a.meta().mollifier_id != b.meta().mollifier_id)
    meta.mollifier_id = a.meta().mollifier_id + " + " + b.meta().mollifier_id;
  return VectorOpNet(a.domain(), a.m(), std::move(entries), meta);
}

VectorOpNet lie_so(const std::vector<Field>& X, const VectorOpNet& phi,
                   const std::vector<std::vector<Field>>& coeff) {
  int n = phi.n(), m = phi.m();
  if (int(X.size()) != n)
    throw ConstructionError("lie_so needs one vector component per axis");
  if (!coeff.empty()) {
    if (int(coeff.size()) != m)
      throw ConstructionError("variance correction must be m x m");
    for (const auto& row : coeff)
      if (int(row.size()) != m)
        throw ConstructionError("variance correction must be m x m");
  }
  bool x_zero = true;
  for (const auto& c : X)
    if (!c.is_zero()) x_zero = false;

  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < m; ++k) {
      std::vector<double> cs;
      std::vector<ScalarOpPtr> kids;
      for (int a = 0; a < n; ++a)
        if (!X[size_t(a)].is_zero()) {
          cs.push_back(1.0);
          kids.push_back(left_mul_op(X[size_t(a)], out_deriv_op(a, phi.entry(i, k))));
        }
      if (!coeff.empty())
        for (int j = 0; j < m; ++j)
          if (!coeff[size_t(i)][size_t(j)].is_zero()) {
            cs.push_back(1.0);
            kids.push_back(left_mul_op(coeff[size_t(i)][size_t(j)], phi.entry(j, k)));
          }
      if (!x_zero) {
        cs.push_back(-1.0);
        kids.push_back(pre_lie_op(X, phi.entry(i, k)));
      }
      if (!coeff.empty())
        for (int j = 0; j < m; ++j)
          if (!coeff[size_t(j)][size_t(k)].is_zero()) {
            cs.push_back(-1.0);
            kids.push_back(pre_mul_op(coeff[size_t(j)][size_t(k)], phi.entry(i, j)));
          }
      entries.push_back(kids.empty() ? zero_op(n, phi.domain())
                                     : scaled_sum_op(cs, kids));
    }
  NetMeta meta = phi.meta();
  meta.q = std::max(phi.q() - 1, 0);
  meta.zero_class = true;
  meta.cover_id = "lie(" + meta.cover_id + ")";
  return VectorOpNet(phi.domain(), m, std::move(entries), meta);
}

VectorOpNet restrict_so(const VectorOpNet& phi, const Box& V,
                        const PartitionSpec& spec) {
  const Box& U = phi.domain();
  int n = phi.n();
  if (V.n != n) throw ConstructionError("restriction target dimension mismatch");
  if (!box_covers(U, V))
    throw ConstructionError("restriction target " + V.str() +
                            " is not contained in the domain " + U.str());
  if (spec.pieces.empty())
    throw ConstructionError("partition '" + spec.name + "' has no pieces");

  struct Prepared {
    Field w;
    Box w_support;
    std::optional<Field> theta;
    Box theta_plateau;
  };
  std::vector<Prepared> prep;
  for (const PartitionPiece& p : spec.pieces) {
    Prepared pr;
    pr.w = bump_window(p.chi_plateau, p.chi_support);
    pr.w_support = p.chi_support.intersect(V);
    if (pr.w_support.empty())
      throw ConstructionError("partition '" + spec.name +
                              "' has a window disjoint from " + V.str());
    pr.theta_plateau = p.theta_plateau;
    if (box_whole(p.theta_support)) {
      if (!box_same(V, U))
        throw ConstructionError(
            "partition '" + spec.name +
            "' restricts onto a proper subdomain but has no input window");
    } else {
      // Input windows may run past the domain boundary on sides where they
      // have no transition; inputs are supported in U, so only the part of
      // the window inside U ever matters.
      if (p.theta_support.intersect(U).empty())
        throw ConstructionError("partition '" + spec.name +
                                "' input window misses the domain " + U.str());
      if (!box_covers(p.theta_plateau, pr.w_support))
        throw ConstructionError("partition '" + spec.name +
                                "' input window is not 1 across its output window");
      pr.theta = bump_window(p.theta_plateau, p.theta_support);
    }
    prep.push_back(std::move(pr));
  }

  // Summing to 1 (after normalization: positivity of the raw sum) and theta
  // flatness over the supports, both on a sample grid.
  for (const Pt& x : grid_points(clip_box(V), check_grid(n))) {
    double S = 0;
    for (const auto& pr : prep) S += pr.w.eval(x);
    if (S < 1e-10)
      throw ConstructionError("partition '" + spec.name + "' does not cover " +
                              V.str() + " (window sum " + fmt_g(S) + " at " +
                              fmt_g(x[0]) + ")");
    for (const auto& pr : prep)
      if (pr.theta && pr.w.eval(x) != 0.0 &&
          std::abs(pr.theta->eval(x) - 1.0) > 1e-10)
        throw ConstructionError("partition '" + spec.name +
                                "' input window deviates from 1 over its "
                                "output window");
  }

  std::function<ScalarOpPtr(const ScalarOpPtr&)> conv =
      [&](const ScalarOpPtr& e) -> ScalarOpPtr {
    if (dynamic_cast<const ZeroOp*>(e.get())) return zero_op(n, V);
    if (auto* lm = dynamic_cast<const LeftMulOp*>(e.get()))
      return left_mul_op(lm->g, conv(lm->kid));
    std::vector<PieceRT> pieces;
    for (const auto& pr : prep) {
      PieceRT rt;
      rt.w = pr.w;
      rt.w_support = pr.w_support;
      rt.theta = pr.theta;
      rt.theta_plateau = pr.theta_plateau;
      rt.kid = e;
      pieces.push_back(std::move(rt));
    }
    return std::make_shared<WindowedSumOp>(V, std::move(pieces), spec.name);
  };

  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < phi.m(); ++i)
    for (int j = 0; j < phi.m(); ++j) entries.push_back(conv(phi.entry(i, j)));
  NetMeta meta = phi.meta();
  meta.partition_id = spec.name;
  meta.cover_id = "restrict " + V.str() + " of " + meta.cover_id;
  return VectorOpNet(V, phi.m(), std::move(entries), meta);
}

VectorOpNet glue_so(const std::vector<Box>& cover, const std::vector<VectorOpNet>& nets,
                    const std::vector<std::pair<Box, Box>>& chi, const Box& U,
                    const std::string& partition_name) {
  size_t L = cover.size();
  if (L == 0 || nets.size() != L || chi.size() != L)
    throw ConstructionError("glue_so needs matching nonempty cover, net and "
                            "window lists");
  int n = U.n, m = nets.front().m();
  for (size_t l = 0; l < L; ++l) {
    if (nets[l].n() != n || nets[l].m() != m)
      throw ConstructionError("glued nets disagree in dimension");
    if (!box_same(nets[l].domain(), cover[l]))
      throw ConstructionError("net " + std::to_string(l) +
                              " does not live on its cover member");
    if (!box_covers(U, cover[l]))
      throw ConstructionError("cover member " + cover[l].str() +
                              " leaves the glued domain " + U.str());
    // Windows may run past the shared boundary of U (no transition there);
    // subordination is judged on the part inside U. Validity of pairings near
    // internal cover edges is handled dynamically by eps_cap.
    Box S = chi[l].second.intersect(U);
    if (S.empty() || !box_covers(cover[l], S))
      throw ConstructionError("gluing window " + chi[l].second.str() +
                              " is not subordinate to its cover member " +
                              cover[l].str());
  }

  std::vector<Field> ws;
  for (size_t l = 0; l < L; ++l)
    ws.push_back(bump_window(chi[l].first, chi[l].second));
  for (const Pt& x : grid_points(clip_box(U), check_grid(n))) {
    double S = 0;
    for (const auto& w : ws) S += w.eval(x);
    if (S < 1e-10)
      throw ConstructionError("gluing windows do not cover " + U.str() +
                              " (window sum " + fmt_g(S) + ")");
  }

  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      bool all_zero = true;
      for (size_t l = 0; l < L; ++l)
        if (!dynamic_cast<const ZeroOp*>(nets[l].entry(i, j).get()))
          all_zero = false;
      if (all_zero) {
        entries.push_back(zero_op(n, U));
        continue;
      }
      std::vector<PieceRT> pieces;
      for (size_t l = 0; l < L; ++l) {
        PieceRT rt;
        rt.w = ws[l];
        rt.w_support = chi[l].second.intersect(U);
        rt.clip = cover[l];
        rt.kid = nets[l].entry(i, j);
        pieces.push_back(std::move(rt));
      }
      entries.push_back(
          std::make_shared<WindowedSumOp>(U, std::move(pieces), partition_name));
    }

  NetMeta meta = nets.front().meta();
  for (const auto& net : nets) {
    meta.q = std::min(meta.q, net.q());
    meta.r0 = std::max(meta.r0, net.r0());
    meta.zero_class = meta.zero_class && net.zero_class();
    if (net.meta().mollifier_id != meta.mollifier_id)
      meta.mollifier_id = "mixed";
  }
  meta.partition_id = partition_name;
  meta.cover_id = "glue " + std::to_string(L) + " charts on " + U.str();
  return VectorOpNet(U, m, std::move(entries), meta);
}

// ---------------------------------------------------------------------------
// Pushforward

BundleIso BundleIso::translation(const Box& from, const Pt& shift, int m) {
  BundleIso iso;
  iso.map = AffineMap::translation(from.n, shift);
  iso.from = from;
  iso.to = from;
  for (int i = 0; i < from.n; ++i) {
    iso.to.lo[i] = from.lo[i] + shift[i];
    iso.to.hi[i] = from.hi[i] + shift[i];
  }
  iso.m = m;
  return iso;
}

BundleIso BundleIso::linear(const Box& from, double scale, int m) {
  if (scale == 0.0) throw ConstructionError("linear bundle map needs scale != 0");
  BundleIso iso;
  iso.map = AffineMap::identity(from.n);
  for (int i = 0; i < from.n; ++i) iso.map.A[i * kMaxDim + i] = scale;
  iso.from = from;
  iso.to = from;
  for (int i = 0; i < from.n; ++i) {
    double a = scale * from.lo[i], b = scale * from.hi[i];
    iso.to.lo[i] = std::min(a, b);
    iso.to.hi[i] = std::max(a, b);
  }
  iso.m = m;
  return iso;
}

VectorOpNet pushforward_so(const BundleIso& mu, const VectorOpNet& phi) {
  int n = phi.n(), m = phi.m();
  if (mu.map.n != n || mu.from.n != n)
    throw ConstructionError("bundle map dimension mismatch");
  if (mu.m != m) throw ConstructionError("bundle map fiber dimension mismatch");
  if (!box_same(mu.from, phi.domain()))
    throw ConstructionError("bundle map source " + mu.from.str() +
                            " is not the net domain " + phi.domain().str());
  bool have_fiber = !mu.fiber.empty();
  if (have_fiber) {
    if (int(mu.fiber.size()) != m * m || int(mu.fiber_inv.size()) != m * m)
      throw ConstructionError("fiber matrices must be m x m");
    Box probe = clip_box(mu.from);
    for (const Pt& x : grid_points(probe, check_grid(n)))
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < m; ++k) {
          double s = 0;
          for (int j = 0; j < m; ++j)
            s += mu.fiber[size_t(i * m + j)].eval(x) *
                 mu.fiber_inv[size_t(j * m + k)].eval(x);
          if (std::abs(s - (i == k ? 1.0 : 0.0)) > 1e-10)
            throw ConstructionError("fiber matrix times its inverse deviates "
                                    "from the identity");
        }
  }

  AffineMap tau = mu.map;
  AffineMap inv = tau.inverse();
  std::vector<Expr> inv_exprs = inv.exprs();
  // Length stretch bound of tau: exact for axis-aligned maps, Frobenius
  // otherwise.
  double amp = 0;
  bool aligned = true;
  double frob = 0;
  for (int r = 0; r < n; ++r) {
    int nz = 0;
    for (int c = 0; c < n; ++c) {
      double a = tau.A[r * kMaxDim + c];
      frob += a * a;
      if (a != 0.0) {
        ++nz;
        amp = std::max(amp, std::abs(a));
      }
    }
    if (nz != 1) aligned = false;
  }
  if (!aligned) amp = std::sqrt(frob);

  auto conj = [&](const ScalarOpPtr& kid, const std::optional<Field>& pre) {
    auto op = std::make_shared<ConjOp>();
    op->tau = tau;
    op->inv = inv;
    op->dom = mu.to;
    op->inv_exprs = inv_exprs;
    op->pre = pre;
    op->kid = kid;
    op->amp = amp;
    return op;
  };

  std::vector<ScalarOpPtr> entries;
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < m; ++k) {
      if (!have_fiber) {
        if (dynamic_cast<const ZeroOp*>(phi.entry(i, k).get()))
          entries.push_back(zero_op(n, mu.to));
        else
          entries.push_back(conj(phi.entry(i, k), std::nullopt));
        continue;
      }
      std::vector<double> cs;
      std::vector<ScalarOpPtr> kids;
      for (int j = 0; j < m; ++j)
        for (int l = 0; l < m; ++l) {
          if (dynamic_cast<const ZeroOp*>(phi.entry(j, l).get())) continue;
          Field out_f = Field::compose(Field::from_expr(mu.fiber[size_t(i * m + j)]),
                                       inv_exprs);
          Field pre_f = Field::from_expr(mu.fiber_inv[size_t(l * m + k)]);
          cs.push_back(1.0);
          kids.push_back(left_mul_op(out_f, conj(phi.entry(j, l), pre_f)));
        }
      entries.push_back(kids.empty() ? zero_op(n, mu.to) : scaled_sum_op(cs, kids));
    }

  NetMeta meta = phi.meta();
  meta.r0 = phi.r0() * amp;
  meta.cover_id = "push(" + meta.cover_id + ")";
  return VectorOpNet(mu.to, m, std::move(entries), meta);
}

// ---------------------------------------------------------------------------
// Affine pullback of distributions

Distribution affine_pullback(const Distribution& u, const AffineMap& tau,
                             const Box& new_domain) {
  int n = u.n();
  if (tau.n != n || new_domain.n != n)
    throw ConstructionError("affine pullback dimension mismatch");
  if (tau.is_identity() && box_same(new_domain, u.domain())) return u;
  AffineMap inv = tau.inverse();
  double adet = std::abs(inv.det());
  std::vector<Expr> tau_exprs = tau.exprs();
  Distribution out = Distribution::zero(n, new_domain);

  for (const auto& t : u.deltas()) {
    Pt p2 = inv.apply(t.p);
    bool inside = true;
    for (int i = 0; i < n; ++i)
      if (!(new_domain.lo[i] < p2[i] && p2[i] < new_domain.hi[i])) inside = false;
    if (!inside) continue;
    for (const auto& [d, c] : expand_derivs(inv, t.gamma, n))
      out = out + Distribution::delta(new_domain, p2, d).scaled(t.coeff * adet * c);
  }

  for (const auto& t : u.densities()) {
    Region r2;
    if (auto bx = axis_image(inv, t.region.box)) {
      r2.box = bx->intersect(new_domain);
    } else {
      // Bounding data unavailable for axis-mixing maps; keep the whole box and
      // guard by membership of tau(x) in the original box.
      r2.box = new_domain;
      Expr g(1.0);
      for (int i = 0; i < n; ++i) {
        if (std::isfinite(t.region.box.lo[i]))
          g = g * (tau_exprs[size_t(i)] - Expr(t.region.box.lo[i]));
        if (std::isfinite(t.region.box.hi[i]))
          g = g * (Expr(t.region.box.hi[i]) - tau_exprs[size_t(i)]);
      }
      r2.guard = Field::from_expr(g);
      r2.guard_expr = g;
    }
    if (t.region.guard) {
      Field gf = Field::compose(*t.region.guard, tau_exprs);
      if (r2.guard) gf = Field::product({*r2.guard, gf});
      r2.guard = gf;
      if (t.region.guard_expr) {
        Expr ge = tau.substitute(*t.region.guard_expr);
        r2.guard_expr = r2.guard_expr ? (*r2.guard_expr * ge) : ge;
      } else {
        r2.guard_expr = std::nullopt;
      }
    }
    if (r2.box.empty()) continue;
    // Densities transform without the Jacobian: the |det| of the pairing
    // cancels against the change of variables in the integral, so a function
    // pulls back by plain composition. Deltas keep the factor (they are
    // measures under the function identification).
    Distribution p =
        t.density_expr
            ? Distribution::piece(new_domain, r2, tau.substitute(*t.density_expr))
            : Distribution::piece(new_domain, r2,
                                  Field::compose(t.density, tau_exprs));
    out = out + p.scaled(t.coeff);
  }

  for (const auto& t : u.ops()) {
    Distribution wi = t.inner->mul(t.weight);
    Distribution pw = affine_pullback(wi, tau, new_domain);
    for (const auto& [d, c] : expand_derivs(inv, t.beta, n)) {
      Distribution term = pw;
      for (int ax = 0; ax < n; ++ax)
        for (int r = 0; r < d[ax]; ++r) term = term.deriv(ax);
      double sgn = order(d) % 2 ? -1.0 : 1.0;
      out = out + term.scaled(t.coeff * c * sgn);
    }
  }
  return out;
}

}  // namespace gensec
