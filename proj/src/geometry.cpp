#include "gensec/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gensec/errors.hpp"
#include "gensec/text.hpp"

namespace gensec {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Row-major m x m numeric helpers.
std::vector<double> mat_mul(int m, const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> c(m * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < m; ++k)
      for (int j = 0; j < m; ++j) c[i * m + j] += a[i * m + k] * b[k * m + j];
  return c;
}

std::vector<double> mat_id(int m) {
  std::vector<double> a(m * m, 0.0);
  for (int i = 0; i < m; ++i) a[i * m + i] = 1.0;
  return a;
}

// (a tensor b) acting on slot-major flattened indices.
std::vector<double> kron(const std::vector<double>& a, int ma, const std::vector<double>& b,
                         int mb) {
  std::vector<double> c(ma * mb * ma * mb);
  for (int i = 0; i < ma; ++i)
    for (int k = 0; k < mb; ++k)
      for (int j = 0; j < ma; ++j)
        for (int l = 0; l < mb; ++l)
          c[(i * mb + k) * (ma * mb) + (j * mb + l)] = a[i * ma + j] * b[k * mb + l];
  return c;
}

double det_n(const double* a, int n) {
  if (n == 1) return a[0];
  if (n == 2) return a[0] * a[3] - a[1] * a[2];
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

// Signed cofactor of entry (r, c).
double cof_n(const double* a, int n, int r, int c) {
  if (n == 1) return 1.0;
  if (n == 2) {
    double minor = a[(1 - r) * 2 + (1 - c)];
    return ((r + c) % 2 ? -minor : minor);
  }
  int rr[2], cc[2], ri = 0, ci = 0;
  for (int i = 0; i < 3; ++i) {
    if (i != r) rr[ri++] = i;
    if (i != c) cc[ci++] = i;
  }
  double minor = a[rr[0] * 3 + cc[0]] * a[rr[1] * 3 + cc[1]] -
                 a[rr[0] * 3 + cc[1]] * a[rr[1] * 3 + cc[0]];
  return ((r + c) % 2 ? -minor : minor);
}

// Symbolic m x m inverse by adjugate, m <= 3. Row-major in and out.
Expr expr_minor2(const std::vector<Expr>& a, int r0, int r1, int c0, int c1) {
  return a[r0 * 3 + c0] * a[r1 * 3 + c1] - a[r0 * 3 + c1] * a[r1 * 3 + c0];
}

Expr expr_cof(const std::vector<Expr>& a, int m, int r, int c) {
  if (m == 1) return Expr::num(1.0);
  if (m == 2) {
    Expr minor = a[(1 - r) * 2 + (1 - c)];
    return ((r + c) % 2 ? -minor : minor);
  }
  int rr[2], cc[2], ri = 0, ci = 0;
  for (int i = 0; i < 3; ++i) {
    if (i != r) rr[ri++] = i;
    if (i != c) cc[ci++] = i;
  }
  Expr minor = expr_minor2(a, rr[0], rr[1], cc[0], cc[1]);
  return ((r + c) % 2 ? -minor : minor);
}

Expr expr_det(const std::vector<Expr>& a, int m) {
  if (m == 1) return a[0];
  if (m == 2) return a[0] * a[3] - a[1] * a[2];
  return a[0] * expr_minor2(a, 1, 2, 1, 2) - a[1] * expr_minor2(a, 1, 2, 0, 2) +
         a[2] * expr_minor2(a, 1, 2, 0, 1);
}

std::vector<Expr> expr_inv(const std::vector<Expr>& a, int m) {
  if (m > 3) throw ConstructionError("symbolic inverse limited to fiber dimension 3");
  Expr det = expr_det(a, m);
  std::vector<Expr> out(m * m);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] = expr_cof(a, m, c, r) / det;
  return out;
}

std::vector<Expr> expr_inv_transpose(const std::vector<Expr>& a, int m) {
  if (m > 3) throw ConstructionError("symbolic inverse limited to fiber dimension 3");
  Expr det = expr_det(a, m);
  std::vector<Expr> out(m * m);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] = expr_cof(a, m, r, c) / det;
  return out;
}

bool box_covers(const Box& outer, const Box& inner) {
  for (int ax = 0; ax < outer.n; ++ax)
    if (inner.lo[ax] < outer.lo[ax] - 1e-12 || inner.hi[ax] > outer.hi[ax] + 1e-12)
      return false;
  return true;
}

// Slot digit <-> flat fiber index, slot 0 most significant.
std::vector<int> unflat(int K, int p, int n) {
  std::vector<int> d(p);
  for (int a = p - 1; a >= 0; --a) {
    d[a] = K % n;
    K /= n;
  }
  return d;
}

int reflat(const std::vector<int>& d, int n) {
  int K = 0;
  for (int v : d) K = K * n + v;
  return K;
}

int ipow(int b, int e) {
  int r = 1;
  while (e-- > 0) r *= b;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// AffineMap

AffineMap AffineMap::identity(int n) {
  AffineMap m;
  m.n = n;
  for (int i = 0; i < n; ++i) m.A[i * kMaxDim + i] = 1.0;
  return m;
}

AffineMap AffineMap::translation(int n, const Pt& shift) {
  AffineMap m = identity(n);
  for (int i = 0; i < n; ++i) m.b[i] = shift[i];
  return m;
}

Pt AffineMap::apply(const Pt& x) const {
  Pt y = pt0();
  for (int r = 0; r < n; ++r) {
    double v = b[r];
    for (int c = 0; c < n; ++c) v += A[r * kMaxDim + c] * x[c];
    y[r] = v;
  }
  return y;
}

double AffineMap::det() const {
  double a[9] = {0};
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) a[r * n + c] = A[r * kMaxDim + c];
  return det_n(a, n);
}

AffineMap AffineMap::inverse() const {
  double a[9] = {0};
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) a[r * n + c] = A[r * kMaxDim + c];
  double d = det_n(a, n);
  if (std::abs(d) < 1e-14)
    throw ConstructionError("affine map is singular (det " + fmt_g(d) + ")");
  AffineMap inv;
  inv.n = n;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) inv.A[r * kMaxDim + c] = cof_n(a, n, c, r) / d;
  Pt mb = inv.apply(Pt{-b[0], -b[1], -b[2]});
  // inverse() maps y back to x: x = Ainv y - Ainv b.
  for (int r = 0; r < n; ++r) inv.b[r] = mb[r] + inv.b[r];
  return inv;
}

AffineMap AffineMap::after(const AffineMap& g) const {
  AffineMap h;
  h.n = n;
  for (int r = 0; r < n; ++r) {
    double v = b[r];
    for (int c = 0; c < n; ++c) {
      v += A[r * kMaxDim + c] * g.b[c];
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += A[r * kMaxDim + k] * g.A[k * kMaxDim + c];
      h.A[r * kMaxDim + c] = s;
    }
    h.b[r] = v;
  }
  return h;
}

bool AffineMap::is_identity() const {
  for (int r = 0; r < n; ++r) {
    if (b[r] != 0.0) return false;
    for (int c = 0; c < n; ++c)
      if (A[r * kMaxDim + c] != (r == c ? 1.0 : 0.0)) return false;
  }
  return true;
}

Box AffineMap::image(const Box& src) const {
  if (src.empty()) return src;
  Box out;
  out.n = n;
  for (int r = 0; r < n; ++r) {
    int col = -1;
    for (int c = 0; c < n; ++c) {
      if (A[r * kMaxDim + c] == 0.0) continue;
      if (col >= 0)
        throw ConstructionError("box image needs an axis-aligned affine map");
      col = c;
    }
    if (col < 0) throw ConstructionError("affine map is singular on row " + std::to_string(r));
    double s = A[r * kMaxDim + col];
    double a = s * src.lo[col] + b[r], bb = s * src.hi[col] + b[r];
    out.lo[r] = std::min(a, bb);
    out.hi[r] = std::max(a, bb);
  }
  return out;
}

std::vector<Expr> AffineMap::exprs() const {
  std::vector<Expr> out;
  for (int r = 0; r < n; ++r) {
    Expr e = Expr::num(b[r]);
    for (int c = 0; c < n; ++c)
      if (A[r * kMaxDim + c] != 0.0) e += Expr::num(A[r * kMaxDim + c]) * Expr::var(c);
    out.push_back(e);
  }
  return out;
}

Expr AffineMap::substitute(const Expr& e) const {
  std::vector<std::vector<double>> rows(n, std::vector<double>(n));
  std::vector<double> off(n);
  for (int r = 0; r < n; ++r) {
    off[r] = b[r];
    for (int c = 0; c < n; ++c) rows[r][c] = A[r * kMaxDim + c];
  }
  return substitute_affine(e, rows, off);
}

int Transition::comp_at(const Pt& x) const {
  for (size_t c = 0; c < comps.size(); ++c)
    if (comps[c].src.contains(x)) return int(c);
  return -1;
}

// ---------------------------------------------------------------------------
// ChartedManifold

ChartedManifold::ChartedManifold(int n, std::string id, std::vector<Box> charts,
                                 std::vector<Transition> transitions)
    : n_(n), id_(std::move(id)), charts_(std::move(charts)), transitions_(std::move(transitions)) {
  if (n_ < 1 || n_ > kMaxDim)
    throw ConstructionError("manifold dimension out of range: " + std::to_string(n_));
  if (charts_.empty()) throw ConstructionError("atlas needs at least one chart");
  for (const Box& c : charts_) {
    if (c.n != n_) throw ConstructionError("chart box dimension mismatch in " + id_);
    if (c.empty()) throw ConstructionError("empty chart box in " + id_);
  }
  int nc = int(charts_.size());
  for (size_t a = 0; a < transitions_.size(); ++a) {
    const Transition& t = transitions_[a];
    if (t.from < 0 || t.from >= nc || t.to < 0 || t.to >= nc || t.from == t.to)
      throw ConstructionError("bad transition endpoints in " + id_);
    for (size_t bidx = 0; bidx < a; ++bidx)
      if (transitions_[bidx].from == t.from && transitions_[bidx].to == t.to)
        throw ConstructionError("duplicate transition in " + id_);
    if (t.comps.empty()) throw ConstructionError("transition without branches in " + id_);
    for (const TransComp& c : t.comps) {
      if (c.src.n != n_ || c.map.n != n_)
        throw ConstructionError("transition branch dimension mismatch in " + id_);
      if (!c.src.bounded())
        throw ConstructionError("transition branch with unbounded source in " + id_);
      if (!box_covers(charts_[t.from], c.src))
        throw ConstructionError("transition branch leaves its source chart in " + id_);
      if (!box_covers(charts_[t.to], c.map.image(c.src)))
        throw ConstructionError("transition branch leaves its target chart in " + id_);
    }
  }
}

std::shared_ptr<const ChartedManifold> ChartedManifold::box(const Box& b) {
  std::string id = "box";
  for (int ax = 0; ax < b.n; ++ax) id += " " + fmt_g(b.lo[ax]) + " " + fmt_g(b.hi[ax]);
  return std::make_shared<ChartedManifold>(b.n, id, std::vector<Box>{b},
                                           std::vector<Transition>{});
}

std::shared_ptr<const ChartedManifold> ChartedManifold::circle() {
  std::vector<Box> charts = {Box::interval(-kPi, kPi), Box::interval(0, 2 * kPi)};
  Transition t01{0, 1, {{Box::interval(0, kPi), AffineMap::identity(1)},
                        {Box::interval(-kPi, 0), AffineMap::translation(1, {2 * kPi, 0, 0})}}};
  Transition t10{1, 0, {{Box::interval(0, kPi), AffineMap::identity(1)},
                        {Box::interval(kPi, 2 * kPi), AffineMap::translation(1, {-2 * kPi, 0, 0})}}};
  return std::make_shared<ChartedManifold>(1, "circle", charts,
                                           std::vector<Transition>{t01, t10});
}

std::shared_ptr<const ChartedManifold> ChartedManifold::torus() {
  // Charts are products of the two circle charts; index = 2*a + b.
  auto I = [](int a) { return a == 0 ? Box::interval(-kPi, kPi) : Box::interval(0, 2 * kPi); };
  struct AxisComp {
    Box src;
    double shift;
  };
  auto axis_comps = [&](int a, int a2) {
    std::vector<AxisComp> out;
    if (a == a2) {
      out.push_back({I(a), 0.0});
    } else if (a == 0) {
      out.push_back({Box::interval(0, kPi), 0.0});
      out.push_back({Box::interval(-kPi, 0), 2 * kPi});
    } else {
      out.push_back({Box::interval(0, kPi), 0.0});
      out.push_back({Box::interval(kPi, 2 * kPi), -2 * kPi});
    }
    return out;
  };
  std::vector<Box> charts;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      Box ia = I(a), ib = I(b);
      charts.push_back(Box::rect(ia.lo[0], ia.hi[0], ib.lo[0], ib.hi[0]));
    }
  std::vector<Transition> ts;
  for (int from = 0; from < 4; ++from)
    for (int to = 0; to < 4; ++to) {
      if (from == to) continue;
      Transition t{from, to, {}};
      for (const AxisComp& cx : axis_comps(from >> 1, to >> 1))
        for (const AxisComp& cy : axis_comps(from & 1, to & 1)) {
          TransComp c;
          c.src = Box::rect(cx.src.lo[0], cx.src.hi[0], cy.src.lo[0], cy.src.hi[0]);
          c.map = AffineMap::translation(2, {cx.shift, cy.shift, 0});
          t.comps.push_back(c);
        }
      ts.push_back(std::move(t));
    }
  return std::make_shared<ChartedManifold>(2, "torus", charts, ts);
}

std::shared_ptr<const ChartedManifold> ChartedManifold::named(const std::string& id) {
  std::string s = trim_ws(id);
  if (s == "circle") return circle();
  if (s == "torus") return torus();
  if (s.rfind("box", 0) == 0) {
    std::istringstream is(s.substr(3));
    std::vector<double> vals;
    double v;
    while (is >> v) vals.push_back(v);
    if (vals.empty() || vals.size() % 2 || vals.size() > 2 * kMaxDim)
      throw ConfigError("box manifold needs 'box lo hi [lo hi [lo hi]]', got '" + s + "'");
    Box b;
    b.n = int(vals.size()) / 2;
    for (int ax = 0; ax < b.n; ++ax) {
      b.lo[ax] = vals[2 * ax];
      b.hi[ax] = vals[2 * ax + 1];
    }
    return box(b);
  }
  throw ConfigError("unknown manifold '" + s + "'");
}

const Transition* ChartedManifold::transition(int i, int j) const {
  for (const Transition& t : transitions_)
    if (t.from == i && t.to == j) return &t;
  return nullptr;
}

std::optional<Pt> ChartedManifold::to_chart(int i, int j, const Pt& x) const {
  if (i == j) return charts_[i].contains(x) ? std::optional<Pt>(x) : std::nullopt;
  const Transition* t = transition(i, j);
  if (!t) return std::nullopt;
  int c = t->comp_at(x);
  if (c < 0) return std::nullopt;
  return t->comps[c].map.apply(x);
}

double ChartedManifold::cocycle_residual(int per_axis) const {
  double worst = 0.0;
  for (const Transition& t : transitions_) {
    for (const TransComp& c : t.comps) {
      for (const Pt& x : grid_points(c.src, per_axis)) {
        Pt y = c.map.apply(x);
        // Pair defect: back through the reverse transition.
        if (auto back = to_chart(t.to, t.from, y)) {
          for (int ax = 0; ax < n_; ++ax)
            worst = std::max(worst, std::abs((*back)[ax] - x[ax]));
        }
        // Triple defect for every third chart seeing both representatives.
        for (int k = 0; k < charts(); ++k) {
          if (k == t.from || k == t.to) continue;
          auto direct = to_chart(t.from, k, x);
          auto hop = to_chart(t.to, k, y);
          if (direct && hop)
            for (int ax = 0; ax < n_; ++ax)
              worst = std::max(worst, std::abs((*direct)[ax] - (*hop)[ax]));
        }
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Bundle

namespace {

std::string variance_id(const std::vector<bool>& up) {
  int p = int(up.size());
  int r = 0;
  while (r < p && up[r]) ++r;
  bool canonical = true;
  for (int a = r; a < p; ++a)
    if (up[a]) canonical = false;
  if (canonical) {
    if (p == 0) return "trivial 1";
    if (r == 1 && p == 1) return "tangent";
    return "tensor " + std::to_string(r) + " " + std::to_string(p - r);
  }
  std::string s = "tensor# ";
  for (bool u : up) s += (u ? 'u' : 'd');
  return s;
}

}  // namespace

std::shared_ptr<const Bundle> Bundle::tensor_pattern(std::shared_ptr<const ChartedManifold> M,
                                                     std::vector<bool> up) {
  auto B = std::shared_ptr<Bundle>(new Bundle);
  int n = M->n();
  int p = int(up.size());
  B->base_ = M;
  B->m_ = ipow(n, p);
  B->is_tensor_ = true;
  B->up_ = up;
  B->id_ = variance_id(up);
  for (int i = 0; i < M->charts(); ++i)
    for (int j = 0; j < M->charts(); ++j) {
      const Transition* t = M->transition(i, j);
      if (!t) continue;
      FiberMats fm;
      fm.from = i;
      fm.to = j;
      for (const TransComp& c : t->comps) {
        // Constant Jacobian J = A; slotwise J or inverse-transpose, chained by
        // Kronecker product in slot order.
        std::vector<double> J(n * n), JinvT(n * n);
        AffineMap inv = c.map.inverse();
        for (int r = 0; r < n; ++r)
          for (int cc = 0; cc < n; ++cc) {
            J[r * n + cc] = c.map.A[r * kMaxDim + cc];
            JinvT[r * n + cc] = inv.A[cc * kMaxDim + r];
          }
        std::vector<double> acc = {1.0};
        int macc = 1;
        for (bool u : up) {
          acc = kron(acc, macc, u ? J : JinvT, n);
          macc *= n;
        }
        std::vector<Expr> entries(B->m_ * B->m_);
        for (int e = 0; e < B->m_ * B->m_; ++e) entries[e] = Expr::num(acc[e]);
        fm.per_comp.push_back(std::move(entries));
      }
      B->mats_.push_back(std::move(fm));
    }
  return B;
}

std::shared_ptr<const Bundle> Bundle::trivial(std::shared_ptr<const ChartedManifold> M, int m) {
  if (m < 1) throw ConstructionError("fiber dimension must be positive");
  if (m == 1) return tensor_pattern(std::move(M), {});
  auto B = std::shared_ptr<Bundle>(new Bundle);
  B->base_ = M;
  B->m_ = m;
  B->is_tensor_ = false;
  B->id_ = "trivial " + std::to_string(m);
  for (int i = 0; i < M->charts(); ++i)
    for (int j = 0; j < M->charts(); ++j) {
      const Transition* t = M->transition(i, j);
      if (!t) continue;
      FiberMats fm;
      fm.from = i;
      fm.to = j;
      for (size_t c = 0; c < t->comps.size(); ++c) {
        std::vector<Expr> entries(m * m, Expr::num(0.0));
        for (int d = 0; d < m; ++d) entries[d * m + d] = Expr::num(1.0);
        fm.per_comp.push_back(std::move(entries));
      }
      B->mats_.push_back(std::move(fm));
    }
  return B;
}

std::shared_ptr<const Bundle> Bundle::tangent(std::shared_ptr<const ChartedManifold> M) {
  return tensor_pattern(std::move(M), {true});
}

std::shared_ptr<const Bundle> Bundle::tensor(std::shared_ptr<const ChartedManifold> M, int r,
                                             int s) {
  if (r < 0 || s < 0) throw ConstructionError("tensor ranks must be non-negative");
  std::vector<bool> up(r, true);
  up.insert(up.end(), s, false);
  return tensor_pattern(std::move(M), up);
}

std::shared_ptr<const Bundle> Bundle::generic(std::shared_ptr<const ChartedManifold> M, int m,
                                              std::vector<FiberMats> mats, std::string id) {
  if (m < 1) throw ConstructionError("fiber dimension must be positive");
  auto B = std::shared_ptr<Bundle>(new Bundle);
  B->base_ = M;
  B->m_ = m;
  B->is_tensor_ = false;
  B->id_ = std::move(id);
  for (int i = 0; i < M->charts(); ++i)
    for (int j = 0; j < M->charts(); ++j) {
      const Transition* t = M->transition(i, j);
      if (!t) continue;
      const FiberMats* found = nullptr;
      for (const FiberMats& fm : mats)
        if (fm.from == i && fm.to == j) found = &fm;
      if (!found)
        throw ConstructionError("missing fiber matrices for charts " + std::to_string(i) +
                                " -> " + std::to_string(j));
      if (found->per_comp.size() != t->comps.size())
        throw ConstructionError("fiber matrix branch count mismatch for charts " +
                                std::to_string(i) + " -> " + std::to_string(j));
      for (const auto& entries : found->per_comp)
        if (int(entries.size()) != m * m)
          throw ConstructionError("fiber matrix must have " + std::to_string(m * m) +
                                  " entries");
      B->mats_.push_back(*found);
    }
  return B;
}

std::shared_ptr<const Bundle> Bundle::from_id(std::shared_ptr<const ChartedManifold> M,
                                              const std::string& id) {
  std::string s = trim_ws(id);
  if (s == "tangent") return tangent(std::move(M));
  std::istringstream is(s);
  std::string head;
  is >> head;
  if (head == "trivial") {
    int m;
    if (is >> m) return trivial(std::move(M), m);
  } else if (head == "tensor") {
    int r, ss;
    if (is >> r >> ss) return tensor(std::move(M), r, ss);
  } else if (head == "tensor#") {
    std::string pat;
    if (is >> pat) {
      std::vector<bool> up;
      for (char c : pat) {
        if (c != 'u' && c != 'd') throw ConfigError("bad variance pattern '" + pat + "'");
        up.push_back(c == 'u');
      }
      return tensor_pattern(std::move(M), up);
    }
  }
  throw ConfigError("unknown bundle '" + s + "'");
}

std::shared_ptr<const Bundle> Bundle::dual() const {
  if (is_tensor_) {
    std::vector<bool> flipped = up_;
    flipped.flip();
    return tensor_pattern(base_, flipped);
  }
  auto B = std::shared_ptr<Bundle>(new Bundle);
  B->base_ = base_;
  B->m_ = m_;
  B->is_tensor_ = false;
  B->id_ = id_ + "*";
  for (const FiberMats& fm : mats_) {
    FiberMats out;
    out.from = fm.from;
    out.to = fm.to;
    for (const auto& entries : fm.per_comp)
      out.per_comp.push_back(expr_inv_transpose(entries, m_));
    B->mats_.push_back(std::move(out));
  }
  return B;
}

const std::vector<bool>& Bundle::variance() const {
  if (!is_tensor_) throw ConstructionError("bundle " + id_ + " has no variance list");
  return up_;
}

std::optional<std::vector<double>> Bundle::matrix_at(int i, int j, const Pt& x) const {
  if (i == j) return base_->chart_box(i).contains(x) ? std::optional(mat_id(m_)) : std::nullopt;
  const Transition* t = base_->transition(i, j);
  if (!t) return std::nullopt;
  int c = t->comp_at(x);
  if (c < 0) return std::nullopt;
  const std::vector<Expr>& entries = matrix_exprs(i, j, c);
  std::vector<double> out(m_ * m_);
  for (int e = 0; e < m_ * m_; ++e) out[e] = entries[e].eval(x);
  return out;
}

const std::vector<Expr>& Bundle::matrix_exprs(int i, int j, int comp) const {
  for (const FiberMats& fm : mats_)
    if (fm.from == i && fm.to == j) return fm.per_comp.at(comp);
  throw ConstructionError("no fiber matrices for charts " + std::to_string(i) + " -> " +
                          std::to_string(j));
}

double Bundle::cocycle_residual(int per_axis) const {
  const ChartedManifold& M = *base_;
  double worst = 0.0;
  auto defect = [&](const std::vector<double>& a, const std::vector<double>& bmat) {
    for (int e = 0; e < m_ * m_; ++e) worst = std::max(worst, std::abs(a[e] - bmat[e]));
  };
  for (const FiberMats& fm : mats_) {
    const Transition* t = M.transition(fm.from, fm.to);
    for (size_t c = 0; c < fm.per_comp.size(); ++c) {
      for (const Pt& x : grid_points(t->comps[c].src, per_axis)) {
        Pt y = t->comps[c].map.apply(x);
        auto Aji = matrix_at(fm.from, fm.to, x);
        auto Aij = matrix_at(fm.to, fm.from, y);
        if (Aji && Aij) defect(mat_mul(m_, *Aij, *Aji), mat_id(m_));
        for (int k = 0; k < M.charts(); ++k) {
          if (k == fm.from || k == fm.to) continue;
          auto Aki = matrix_at(fm.from, k, x);
          auto Akj = matrix_at(fm.to, k, y);
          if (Aki && Akj && Aji) defect(mat_mul(m_, *Akj, *Aji), *Aki);
        }
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// SmoothSection

SmoothSection::SmoothSection(std::shared_ptr<const Bundle> E,
                             std::vector<std::vector<Expr>> comps)
    : bundle_(std::move(E)), comps_(std::move(comps)) {
  const ChartedManifold& M = bundle_->base();
  if (int(comps_.size()) != M.charts())
    throw ConstructionError("section needs one component list per chart");
  for (const auto& chart : comps_) {
    if (int(chart.size()) != bundle_->fiber_dim())
      throw ConstructionError("section components must match the fiber dimension");
    for (const Expr& e : chart)
      if (e.max_var() >= M.n())
        throw ConstructionError("section component uses variable beyond the base dimension");
  }
  fields_.resize(comps_.size());
  for (size_t i = 0; i < comps_.size(); ++i)
    for (const Expr& e : comps_[i]) fields_[i].push_back(Field::from_expr(e));
}

SmoothSection SmoothSection::zero(std::shared_ptr<const Bundle> E) {
  int charts = E->base().charts();
  std::vector<std::vector<Expr>> comps(charts, std::vector<Expr>(E->fiber_dim()));
  return SmoothSection(std::move(E), std::move(comps));
}

SmoothSection SmoothSection::scalar(std::shared_ptr<const ChartedManifold> M, const Expr& e) {
  int charts = M->charts();
  std::vector<std::vector<Expr>> comps(charts, std::vector<Expr>{e});
  return SmoothSection(Bundle::trivial(std::move(M), 1), std::move(comps));
}

std::vector<double> SmoothSection::eval(int chart, const Pt& x) const {
  std::vector<double> out;
  out.reserve(fields_[chart].size());
  for (const Field& f : fields_[chart]) out.push_back(f.eval(x));
  return out;
}

bool SmoothSection::is_zero() const {
  for (const auto& chart : comps_)
    for (const Expr& e : chart)
      if (!e.is_zero()) return false;
  return true;
}

namespace {

void check_same_bundle(const Bundle& a, const Bundle& b, const char* what) {
  if (a.id() != b.id() || a.base().id() != b.base().id() || a.fiber_dim() != b.fiber_dim())
    throw ConstructionError(std::string(what) + " needs matching bundles, got " + a.id() +
                            " vs " + b.id());
}

}  // namespace

SmoothSection SmoothSection::operator+(const SmoothSection& o) const {
  check_same_bundle(*bundle_, *o.bundle_, "section sum");
  std::vector<std::vector<Expr>> comps = comps_;
  for (size_t i = 0; i < comps.size(); ++i)
    for (size_t k = 0; k < comps[i].size(); ++k) comps[i][k] += o.comps_[i][k];
  return SmoothSection(bundle_, std::move(comps));
}

SmoothSection SmoothSection::operator-(const SmoothSection& o) const {
  return *this + o.scaled(-1.0);
}

SmoothSection SmoothSection::scaled(double c) const {
  std::vector<std::vector<Expr>> comps = comps_;
  for (auto& chart : comps)
    for (Expr& e : chart) e = Expr::num(c) * e;
  return SmoothSection(bundle_, std::move(comps));
}

double SmoothSection::overlap_residual(int per_axis) const {
  const ChartedManifold& M = bundle_->base();
  int m = bundle_->fiber_dim();
  double worst = 0.0;
  for (int i = 0; i < M.charts(); ++i)
    for (int j = 0; j < M.charts(); ++j) {
      const Transition* t = M.transition(i, j);
      if (!t) continue;
      for (size_t c = 0; c < t->comps.size(); ++c) {
        const std::vector<Expr>& A = bundle_->matrix_exprs(i, j, int(c));
        for (const Pt& x : grid_points(t->comps[c].src, per_axis)) {
          Pt y = t->comps[c].map.apply(x);
          std::vector<double> si = eval(i, x), sj = eval(j, y);
          for (int a = 0; a < m; ++a) {
            double v = sj[a];
            for (int b = 0; b < m; ++b) v -= A[a * m + b].eval(x) * si[b];
            worst = std::max(worst, std::abs(v));
          }
        }
      }
    }
  return worst;
}

namespace {

void check_serializable_base(const ChartedManifold& M) {
  const std::string& id = M.id();
  if (id != "circle" && id != "torus" && id.rfind("box", 0) != 0)
    throw ConstructionError("custom atlases are runtime-only (manifold '" + id + "')");
}

void check_serializable_bundle(const Bundle& E) {
  check_serializable_base(E.base());
  if (!E.is_tensor() && E.id().rfind("trivial ", 0) != 0)
    throw ConstructionError("custom bundles are runtime-only (bundle '" + E.id() + "')");
}

}  // namespace

std::string SmoothSection::serialize() const {
  check_serializable_bundle(*bundle_);
  std::ostringstream os;
  os << "[smooth-section]\n";
  os << "manifold = " << bundle_->base().id() << "\n";
  os << "bundle = " << bundle_->id() << "\n";
  for (size_t i = 0; i < comps_.size(); ++i)
    for (size_t k = 0; k < comps_[i].size(); ++k)
      os << "comp " << i << " " << k << " = " << comps_[i][k].str() << "\n";
  return os.str();
}

SmoothSection SmoothSection::deserialize(const std::string& text) {
  auto sections = parse_sections(text);
  const TextSection* sec = nullptr;
  for (const auto& s : sections)
    if (s.name == "smooth-section") sec = &s;
  if (!sec) throw ConfigError("no [smooth-section] section");
  auto M = ChartedManifold::named(sec->get("manifold"));
  auto E = Bundle::from_id(M, sec->get("bundle"));
  std::vector<std::vector<Expr>> comps(M->charts(), std::vector<Expr>(E->fiber_dim()));
  for (const KVLine& kv : sec->kv) {
    if (kv.key.rfind("comp ", 0) != 0) continue;
    std::istringstream is(kv.key.substr(5));
    int chart, k;
    if (!(is >> chart >> k) || chart < 0 || chart >= M->charts() || k < 0 ||
        k >= E->fiber_dim())
      throw ConfigError("bad component key '" + kv.key + "'", kv.line, 1);
    comps[chart][k] = parse_expr(kv.value);
  }
  return SmoothSection(std::move(E), std::move(comps));
}

// ---------------------------------------------------------------------------
// Tensor calculus on smooth sections

SmoothSection tensor(const SmoothSection& a, const SmoothSection& b) {
  const Bundle& A = a.bundle();
  const Bundle& B = b.bundle();
  if (!A.is_tensor() || !B.is_tensor())
    throw ConstructionError("tensor product needs tensor bundles");
  if (A.base().id() != B.base().id())
    throw ConstructionError("tensor product needs a common base");
  std::vector<bool> up = A.variance();
  up.insert(up.end(), B.variance().begin(), B.variance().end());
  auto E = Bundle::tensor_pattern(a.bundle_ptr()->base_ptr(), up);
  int ma = A.fiber_dim(), mb = B.fiber_dim();
  int charts = A.base().charts();
  std::vector<std::vector<Expr>> comps(charts, std::vector<Expr>(ma * mb));
  for (int i = 0; i < charts; ++i)
    for (int K = 0; K < ma; ++K)
      for (int L = 0; L < mb; ++L) comps[i][K * mb + L] = a.comp(i, K) * b.comp(i, L);
  return SmoothSection(std::move(E), std::move(comps));
}

SmoothSection contract(const SmoothSection& s, int up_slot, int down_slot) {
  const Bundle& E = s.bundle();
  if (!E.is_tensor()) throw ConstructionError("contraction needs a tensor bundle");
  const std::vector<bool>& up = E.variance();
  int p = int(up.size());
  if (up_slot < 0 || up_slot >= p || down_slot < 0 || down_slot >= p || up_slot == down_slot)
    throw ConstructionError("contraction slots out of range");
  if (!up[up_slot] || up[down_slot])
    throw ConstructionError("contraction needs one contravariant and one covariant slot");
  int n = E.base().n();
  std::vector<bool> rest;
  for (int a = 0; a < p; ++a)
    if (a != up_slot && a != down_slot) rest.push_back(up[a]);
  auto Eout = Bundle::tensor_pattern(s.bundle_ptr()->base_ptr(), rest);
  int charts = E.base().charts();
  int mout = Eout->fiber_dim();
  std::vector<std::vector<Expr>> comps(charts, std::vector<Expr>(mout));
  for (int ch = 0; ch < charts; ++ch)
    for (int K = 0; K < mout; ++K) {
      std::vector<int> dr = unflat(K, p - 2, n);
      Expr acc;
      for (int i = 0; i < n; ++i) {
        std::vector<int> full;
        size_t next = 0;
        for (int a = 0; a < p; ++a) {
          if (a == up_slot || a == down_slot)
            full.push_back(i);
          else
            full.push_back(dr[next++]);
        }
        acc += s.comp(ch, reflat(full, n));
      }
      comps[ch][K] = acc;
    }
  return SmoothSection(std::move(Eout), std::move(comps));
}

namespace {

void check_vector_field(const SmoothSection& X, const ChartedManifold& M, const char* what) {
  if (!X.bundle().is_tensor() || X.bundle().variance() != std::vector<bool>{true} ||
      X.bundle().base().id() != M.id())
    throw ConstructionError(std::string(what) + " needs a tangent vector field");
}

}  // namespace

SmoothSection classical_lie(const SmoothSection& X, const SmoothSection& s) {
  const Bundle& E = s.bundle();
  if (!E.is_tensor()) throw ConstructionError("Lie derivative needs a tensor bundle");
  const ChartedManifold& M = E.base();
  check_vector_field(X, M, "Lie derivative");
  int n = M.n();
  const std::vector<bool>& up = E.variance();
  int p = int(up.size());
  int charts = M.charts();
  std::vector<std::vector<Expr>> comps(charts, std::vector<Expr>(E.fiber_dim()));
  for (int ch = 0; ch < charts; ++ch) {
    for (int K = 0; K < E.fiber_dim(); ++K) {
      std::vector<int> d = unflat(K, p, n);
      Expr acc;
      for (int i = 0; i < n; ++i) acc += X.comp(ch, i) * s.comp(ch, K).diff(i);
      for (int a = 0; a < p; ++a) {
        std::vector<int> sub = d;
        if (up[a]) {
          for (int i = 0; i < n; ++i) {
            sub[a] = i;
            acc -= X.comp(ch, d[a]).diff(i) * s.comp(ch, reflat(sub, n));
          }
        } else {
          for (int i = 0; i < n; ++i) {
            sub[a] = i;
            acc += X.comp(ch, i).diff(d[a]) * s.comp(ch, reflat(sub, n));
          }
        }
      }
      comps[ch][K] = acc;
    }
  }
  return SmoothSection(s.bundle_ptr(), std::move(comps));
}

// ---------------------------------------------------------------------------
// SmoothConnection

SmoothConnection::SmoothConnection(std::shared_ptr<const ChartedManifold> M,
                                   std::vector<std::vector<Expr>> gamma)
    : base_(std::move(M)), gamma_(std::move(gamma)) {
  int n = base_->n();
  if (int(gamma_.size()) != base_->charts())
    throw ConstructionError("connection needs one coefficient list per chart");
  for (const auto& chart : gamma_)
    if (int(chart.size()) != n * n * n)
      throw ConstructionError("connection needs n^3 Christoffel coefficients per chart");
}

SmoothConnection SmoothConnection::flat(std::shared_ptr<const ChartedManifold> M) {
  int n = M->n();
  std::vector<std::vector<Expr>> gamma(M->charts(), std::vector<Expr>(n * n * n));
  return SmoothConnection(std::move(M), std::move(gamma));
}

SmoothConnection SmoothConnection::levi_civita(const SmoothSection& g) {
  const Bundle& E = g.bundle();
  if (!E.is_tensor() || E.variance() != std::vector<bool>{false, false})
    throw ConstructionError("Levi-Civita needs a metric (two covariant slots)");
  const ChartedManifold& M = E.base();
  int n = M.n();
  std::vector<std::vector<Expr>> gamma(M.charts(), std::vector<Expr>(n * n * n));
  for (int ch = 0; ch < M.charts(); ++ch) {
    std::vector<Expr> gm(n * n);
    for (int e = 0; e < n * n; ++e) gm[e] = g.comp(ch, e);
    std::vector<Expr> ginv = expr_inv(gm, n);
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          Expr acc;
          for (int l = 0; l < n; ++l)
            acc += ginv[k * n + l] * (gm[j * n + l].diff(i) + gm[i * n + l].diff(j) -
                                      gm[i * n + j].diff(l));
          gamma[ch][(k * n + i) * n + j] = Expr::num(0.5) * acc;
        }
  }
  return SmoothConnection(g.bundle_ptr()->base_ptr(), std::move(gamma));
}

const Expr& SmoothConnection::christoffel(int chart, int k, int i, int j) const {
  int n = base_->n();
  return gamma_[chart][(k * n + i) * n + j];
}

std::vector<double> SmoothConnection::christoffel_grid(int chart, const Box& K,
                                                       int per_axis) const {
  int n = base_->n();
  std::vector<double> out;
  for (const Pt& x : grid_points(K, per_axis))
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out.push_back(christoffel(chart, k, i, j).eval(x));
  return out;
}

double SmoothConnection::transformation_residual(int per_axis) const {
  const ChartedManifold& M = *base_;
  int n = M.n();
  double worst = 0.0;
  for (int from = 0; from < M.charts(); ++from)
    for (int to = 0; to < M.charts(); ++to) {
      const Transition* t = M.transition(from, to);
      if (!t) continue;
      for (const TransComp& c : t->comps) {
        AffineMap inv = c.map.inverse();
        for (const Pt& x : grid_points(c.src, per_axis)) {
          Pt y = c.map.apply(x);
          for (int gq = 0; gq < n; ++gq)
            for (int al = 0; al < n; ++al)
              for (int be = 0; be < n; ++be) {
                double want = 0.0;
                for (int k = 0; k < n; ++k)
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                      want += c.map.A[gq * kMaxDim + k] * inv.A[i * kMaxDim + al] *
                              inv.A[j * kMaxDim + be] * christoffel(from, k, i, j).eval(x);
                worst = std::max(worst, std::abs(christoffel(to, gq, al, be).eval(y) - want));
              }
        }
      }
    }
  return worst;
}

SmoothSection classical_covderiv(const SmoothConnection& conn, const SmoothSection& X,
                                 const SmoothSection& s) {
  const Bundle& E = s.bundle();
  if (!E.is_tensor()) throw ConstructionError("covariant derivative needs a tensor bundle");
  const ChartedManifold& M = E.base();
  if (M.id() != conn.base().id())
    throw ConstructionError("covariant derivative needs a connection on the same base");
  check_vector_field(X, M, "covariant derivative");
  int n = M.n();
  const std::vector<bool>& up = E.variance();
  int p = int(up.size());
  std::vector<std::vector<Expr>> comps(M.charts(), std::vector<Expr>(E.fiber_dim()));
  for (int ch = 0; ch < M.charts(); ++ch)
    for (int K = 0; K < E.fiber_dim(); ++K) {
      std::vector<int> d = unflat(K, p, n);
      Expr acc;
      for (int i = 0; i < n; ++i) acc += X.comp(ch, i) * s.comp(ch, K).diff(i);
      for (int a = 0; a < p; ++a) {
        std::vector<int> sub = d;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            sub[a] = j;
            if (up[a])
              acc += X.comp(ch, i) * conn.christoffel(ch, d[a], i, j) *
                     s.comp(ch, reflat(sub, n));
            else
              acc -= X.comp(ch, i) * conn.christoffel(ch, j, i, d[a]) *
                     s.comp(ch, reflat(sub, n));
          }
      }
      comps[ch][K] = acc;
    }
  return SmoothSection(s.bundle_ptr(), std::move(comps));
}

SmoothSection classical_curvature(const SmoothConnection& conn) {
  auto M = conn.base_ptr();
  int n = M->n();
  auto E = Bundle::tensor_pattern(M, {true, false, false, false});
  std::vector<std::vector<Expr>> comps(M->charts(), std::vector<Expr>(E->fiber_dim()));
  for (int ch = 0; ch < M->charts(); ++ch)
    for (int l = 0; l < n; ++l)
      for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            Expr acc = conn.christoffel(ch, l, j, k).diff(i) -
                       conn.christoffel(ch, l, i, k).diff(j);
            for (int m = 0; m < n; ++m)
              acc += conn.christoffel(ch, l, i, m) * conn.christoffel(ch, m, j, k) -
                     conn.christoffel(ch, l, j, m) * conn.christoffel(ch, m, i, k);
            comps[ch][((l * n + k) * n + i) * n + j] = acc;
          }
  return SmoothSection(std::move(E), std::move(comps));
}

SmoothSection scalar_curvature(const SmoothConnection& conn, const SmoothSection& g) {
  const Bundle& E = g.bundle();
  if (!E.is_tensor() || E.variance() != std::vector<bool>{false, false})
    throw ConstructionError("scalar curvature needs a metric (two covariant slots)");
  auto M = g.bundle_ptr()->base_ptr();
  if (M->id() != conn.base().id())
    throw ConstructionError("scalar curvature needs a connection on the same base");
  int n = M->n();
  SmoothSection R = classical_curvature(conn);
  std::vector<std::vector<Expr>> comps(M->charts(), std::vector<Expr>(1));
  for (int ch = 0; ch < M->charts(); ++ch) {
    std::vector<Expr> gm(n * n);
    for (int e = 0; e < n * n; ++e) gm[e] = g.comp(ch, e);
    std::vector<Expr> ginv = expr_inv(gm, n);
    Expr acc;
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j) {
        Expr ric;
        for (int i = 0; i < n; ++i) ric += R.comp(ch, ((i * n + k) * n + i) * n + j);
        acc += ginv[k * n + j] * ric;
      }
    comps[ch][0] = acc;
  }
  return SmoothSection(Bundle::trivial(M, 1), std::move(comps));
}

// ---------------------------------------------------------------------------
// DistributionalSection

DistributionalSection::DistributionalSection(std::shared_ptr<const Bundle> E,
                                             std::vector<std::vector<Distribution>> comps)
    : bundle_(std::move(E)), comps_(std::move(comps)) {
  const ChartedManifold& M = bundle_->base();
  if (int(comps_.size()) != M.charts())
    throw ConstructionError("section needs one component list per chart");
  for (int i = 0; i < M.charts(); ++i) {
    if (int(comps_[i].size()) != bundle_->fiber_dim())
      throw ConstructionError("section components must match the fiber dimension");
    for (const Distribution& u : comps_[i]) {
      if (u.n() != M.n())
        throw ConstructionError("component dimension mismatch in chart " + std::to_string(i));
      if (!box_covers(M.chart_box(i), u.domain()))
        throw ConstructionError("component domain leaves chart " + std::to_string(i));
    }
  }
}

DistributionalSection DistributionalSection::zero(std::shared_ptr<const Bundle> E) {
  const ChartedManifold& M = E->base();
  std::vector<std::vector<Distribution>> comps(M.charts());
  for (int i = 0; i < M.charts(); ++i)
    for (int k = 0; k < E->fiber_dim(); ++k)
      comps[i].push_back(Distribution::zero(M.n(), M.chart_box(i)));
  return DistributionalSection(std::move(E), std::move(comps));
}

DistributionalSection DistributionalSection::from_smooth(const SmoothSection& s) {
  const ChartedManifold& M = s.bundle().base();
  std::vector<std::vector<Distribution>> comps(M.charts());
  for (int i = 0; i < M.charts(); ++i)
    for (int k = 0; k < s.m(); ++k)
      comps[i].push_back(Distribution::density(M.chart_box(i), s.comp(i, k)));
  return DistributionalSection(s.bundle_ptr(), std::move(comps));
}

int DistributionalSection::order() const {
  int o = 0;
  for (const auto& chart : comps_)
    for (const Distribution& u : chart) o = std::max(o, u.order());
  return o;
}

double DistributionalSection::overlap_residual(int witnesses_per_comp, double quad_tol) const {
  const ChartedManifold& M = bundle_->base();
  int m = bundle_->fiber_dim();
  double worst = 0.0;
  for (int i = 0; i < M.charts(); ++i)
    for (int j = 0; j < M.charts(); ++j) {
      const Transition* t = M.transition(i, j);
      if (!t) continue;
      for (size_t c = 0; c < t->comps.size(); ++c) {
        const TransComp& tc = t->comps[c];
        Box img = tc.map.image(tc.src);
        AffineMap back = tc.map.inverse();
        double absdet = std::abs(tc.map.det());
        const std::vector<Expr>& A = bundle_->matrix_exprs(i, j, int(c));
        std::vector<Expr> map_exprs = tc.map.exprs();
        for (int w = 0; w < witnesses_per_comp; ++w) {
          // Window witness in the branch image, payload varied per w.
          Box plateau = img, support = img;
          for (int ax = 0; ax < M.n(); ++ax) {
            double mid = 0.5 * (img.lo[ax] + img.hi[ax]), hw = 0.5 * img.width(ax);
            plateau.lo[ax] = mid - 0.35 * hw;
            plateau.hi[ax] = mid + 0.35 * hw;
            support.lo[ax] = mid - 0.7 * hw;
            support.hi[ax] = mid + 0.7 * hw;
          }
          Expr payload = cos(Expr::num(0.5 + 0.25 * w) * Expr::var(0) + Expr::num(0.4 * w));
          if (M.n() > 1) payload = payload * (Expr::num(1.0) + Expr::num(0.3) * sin(Expr::var(M.n() - 1)));
          TestFn psi = window_test_fn(payload, plateau, support);
          Field pulled = Field::compose(psi.f, map_exprs);
          Box pulled_support = back.image(psi.support);
          for (int a = 0; a < m; ++a) {
            double lhs = comps_[j][a].pair(psi, quad_tol);
            double rhs = 0.0;
            for (int b = 0; b < m; ++b) {
              TestFn q{Field::product({Field::from_expr(A[a * m + b]), pulled}),
                       pulled_support, 0, 0};
              rhs += absdet * comps_[i][b].pair(q, quad_tol);
            }
            worst = std::max(worst, std::abs(lhs - rhs));
          }
        }
      }
    }
  return worst;
}

std::string DistributionalSection::serialize() const {
  check_serializable_bundle(*bundle_);
  std::ostringstream os;
  os << "[dist-section]\n";
  os << "manifold = " << bundle_->base().id() << "\n";
  os << "bundle = " << bundle_->id() << "\n";
  for (const auto& chart : comps_)
    for (const Distribution& u : chart) os << u.serialize();
  return os.str();
}

DistributionalSection DistributionalSection::deserialize(const std::string& text) {
  // Head section up to the first [distribution] line, then one slice per
  // component in chart-major order.
  std::vector<std::string> slices;
  std::string head;
  std::string* cur = &head;
  std::istringstream is(text);
  std::string raw;
  while (std::getline(is, raw)) {
    std::string line = raw;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim_ws(line) == "[distribution]") {
      slices.emplace_back();
      cur = &slices.back();
    }
    *cur += raw;
    *cur += '\n';
  }
  auto sections = parse_sections(head);
  const TextSection* sec = nullptr;
  for (const auto& s : sections)
    if (s.name == "dist-section") sec = &s;
  if (!sec) throw ConfigError("no [dist-section] section");
  auto M = ChartedManifold::named(sec->get("manifold"));
  auto E = Bundle::from_id(M, sec->get("bundle"));
  size_t need = size_t(M->charts()) * size_t(E->fiber_dim());
  if (slices.size() != need)
    throw ConfigError("expected " + std::to_string(need) + " [distribution] blocks, got " +
                      std::to_string(slices.size()));
  std::vector<std::vector<Distribution>> comps(M->charts());
  size_t idx = 0;
  for (int i = 0; i < M->charts(); ++i)
    for (int k = 0; k < E->fiber_dim(); ++k)
      comps[i].push_back(Distribution::deserialize(slices[idx++]));
  return DistributionalSection(std::move(E), std::move(comps));
}

}  // namespace gensec
