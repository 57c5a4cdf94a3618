#include "gensec/gen_section.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <sstream>

#include <Eigen/Dense>

#include "gensec/text.hpp"

namespace gensec {

namespace {

bool box_same(const Box& a, const Box& b) {
  if (a.n != b.n) return false;
  for (int i = 0; i < a.n; ++i)
    if (a.lo[i] != b.lo[i] || a.hi[i] != b.hi[i]) return false;
  return true;
}

bool box_covers(const Box& outer, const Box& inner) {
  if (outer.n != inner.n) return false;
  for (int i = 0; i < outer.n; ++i)
    if (inner.lo[i] < outer.lo[i] || inner.hi[i] > outer.hi[i]) return false;
  return true;
}

int ipow(int b, int e) {
  int r = 1;
  while (e-- > 0) r *= b;
  return r;
}

std::vector<int> unflat(int K, int p, int n) {
  std::vector<int> d(p, 0);
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

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pt_str(const Pt& x, int n) {
  std::string s = "(";
  for (int i = 0; i < n; ++i) s += (i ? ", " : "") + fmt_num(x[i]);
  return s + ")";
}

}  // namespace

// ---------------------------------------------------------------------------
// Field-level tensor calculus (classical operations on evaluated components)

std::vector<Field> field_lie(const std::vector<Field>& X, const std::vector<Field>& s,
                             const std::vector<bool>& up, int n) {
  int p = int(up.size());
  int m = ipow(n, p);
  if (int(s.size()) != m) throw ConstructionError("field Lie derivative: component count mismatch");
  std::vector<Field> out(m);
  for (int K = 0; K < m; ++K) {
    std::vector<int> d = unflat(K, p, n);
    std::vector<Field> terms;
    for (int i = 0; i < n; ++i) terms.push_back(X[i] * s[K].d(i));
    for (int a = 0; a < p; ++a) {
      std::vector<int> sub = d;
      for (int i = 0; i < n; ++i) {
        sub[a] = i;
        if (up[a])
          terms.push_back(Field::scale(-1.0, X[d[a]].d(i) * s[reflat(sub, n)]));
        else
          terms.push_back(X[i].d(d[a]) * s[reflat(sub, n)]);
      }
    }
    out[K] = Field::sum(std::move(terms));
  }
  return out;
}

namespace {

// Gamma-correction part of the covariant derivative, without the X . grad term.
std::vector<Field> field_covderiv_gamma(const std::vector<Field>& gamma,
                                        const std::vector<Field>& X,
                                        const std::vector<Field>& s,
                                        const std::vector<bool>& up, int n) {
  int p = int(up.size());
  int m = ipow(n, p);
  std::vector<Field> out(m);
  for (int K = 0; K < m; ++K) {
    std::vector<int> d = unflat(K, p, n);
    std::vector<Field> terms;
    for (int a = 0; a < p; ++a) {
      std::vector<int> sub = d;
      for (int j = 0; j < n; ++j) {
        sub[a] = j;
        const Field& sj = s[reflat(sub, n)];
        for (int i = 0; i < n; ++i) {
          if (up[a])
            terms.push_back(Field::product({X[i], gamma[(d[a] * n + i) * n + j], sj}));
          else
            terms.push_back(
                Field::scale(-1.0, Field::product({X[i], gamma[(j * n + i) * n + d[a]], sj})));
        }
      }
    }
    out[K] = Field::sum(std::move(terms));
  }
  return out;
}

}  // namespace

std::vector<Field> field_covderiv(const std::vector<Field>& gamma,
                                  const std::vector<Field>& X,
                                  const std::vector<Field>& s,
                                  const std::vector<bool>& up, int n) {
  int p = int(up.size());
  int m = ipow(n, p);
  if (int(s.size()) != m)
    throw ConstructionError("field covariant derivative: component count mismatch");
  std::vector<Field> gpart = field_covderiv_gamma(gamma, X, s, up, n);
  std::vector<Field> out(m);
  for (int K = 0; K < m; ++K) {
    std::vector<Field> terms;
    for (int i = 0; i < n; ++i) terms.push_back(X[i] * s[K].d(i));
    terms.push_back(gpart[K]);
    out[K] = Field::sum(std::move(terms));
  }
  return out;
}

std::vector<Field> field_curvature(const std::vector<Field>& gamma, int n) {
  if (int(gamma.size()) != n * n * n)
    throw ConstructionError("field curvature needs n^3 Christoffel fields");
  auto G = [&](int k, int i, int j) -> const Field& { return gamma[(k * n + i) * n + j]; };
  std::vector<Field> out(n * n * n * n);
  for (int l = 0; l < n; ++l)
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          std::vector<Field> terms = {G(l, j, k).d(i), Field::scale(-1.0, G(l, i, k).d(j))};
          for (int m = 0; m < n; ++m) {
            terms.push_back(G(l, i, m) * G(m, j, k));
            terms.push_back(Field::scale(-1.0, G(l, j, m) * G(m, i, k)));
          }
          out[((l * n + k) * n + i) * n + j] = Field::sum(std::move(terms));
        }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise matrix inverse with exact derivative rule

namespace {

class MatInvField : public FieldNode {
 public:
  MatInvField(std::shared_ptr<const std::vector<Field>> g, int n, int r, int c)
      : g_(std::move(g)), n_(n), r_(r), c_(c) {}

  double eval(const double* x) const override {
    Eigen::MatrixXd M(n_, n_);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) M(i, j) = (*g_)[i * n_ + j].eval(x);
    double det = M.determinant();
    if (det == 0.0 || !std::isfinite(det))
      throw EvalError("pointwise matrix inverse hit a singular matrix (det = " + fmt_num(det) +
                      ")");
    return M.inverse()(r_, c_);
  }

  Field deriv(int axis) const override {
    // d(g^-1) = -g^-1 (dg) g^-1, entrywise.
    std::vector<Field> terms;
    for (int a = 0; a < n_; ++a)
      for (int b = 0; b < n_; ++b)
        terms.push_back(Field::scale(
            -1.0, Field::product({entry(r_, a), (*g_)[a * n_ + b].d(axis), entry(b, c_)})));
    return Field::sum(std::move(terms));
  }

 private:
  Field entry(int r, int c) const {
    return Field(std::make_shared<MatInvField>(g_, n_, r, c));
  }

  std::shared_ptr<const std::vector<Field>> g_;
  int n_, r_, c_;
};

}  // namespace

Field matrix_inv_entry(std::vector<Field> g, int n, int r, int c) {
  if (int(g.size()) != n * n) throw ConstructionError("matrix inverse needs n^2 entries");
  if (r < 0 || r >= n || c < 0 || c >= n)
    throw ConstructionError("matrix inverse entry out of range");
  auto shared = std::make_shared<const std::vector<Field>>(std::move(g));
  return Field(std::make_shared<MatInvField>(shared, n, r, c));
}

// ---------------------------------------------------------------------------
// PhiFamily

std::string PhiFamily::key(const Bundle& E) { return E.base().id() + "|" + E.id(); }

void PhiFamily::assign(std::shared_ptr<const Bundle> E, std::vector<VectorOpNet> nets) {
  const ChartedManifold& M = E->base();
  if (int(nets.size()) != M.charts())
    throw ConstructionError("test object needs one net per chart (" +
                            std::to_string(M.charts()) + " for " + M.id() + ")");
  for (int ch = 0; ch < M.charts(); ++ch) {
    if (nets[ch].m() != E->fiber_dim())
      throw ConstructionError("test object net size " + std::to_string(nets[ch].m()) +
                              " does not match fiber dimension " +
                              std::to_string(E->fiber_dim()));
    if (!box_same(nets[ch].domain(), M.chart_box(ch)))
      throw ConstructionError("test object net domain " + nets[ch].domain().str() +
                              " does not match chart box " + M.chart_box(ch).str());
  }
  std::string k = key(*E);
  TestObjectAssignment item{std::move(E), std::move(nets)};
  auto pos = std::lower_bound(items_.begin(), items_.end(), k,
                              [](const TestObjectAssignment& a, const std::string& s) {
                                return key(*a.E) < s;
                              });
  if (pos != items_.end() && key(*pos->E) == k)
    *pos = std::move(item);
  else
    items_.insert(pos, std::move(item));
}

const TestObjectAssignment* PhiFamily::find(const Bundle& E) const {
  std::string k = key(E);
  for (const auto& it : items_)
    if (key(*it.E) == k) return &it;
  return nullptr;
}

const TestObjectAssignment& PhiFamily::at(const Bundle& E) const {
  if (const TestObjectAssignment* it = find(E)) return *it;
  throw ConstructionError("no test object assigned for bundle '" + key(E) + "'");
}

PhiFamily PhiFamily::lin_comb(double ca, const PhiFamily& a, double cb, const PhiFamily& b) {
  PhiFamily out;
  auto scaled = [](double c, const TestObjectAssignment& it) {
    std::vector<VectorOpNet> nets;
    for (const VectorOpNet& n : it.nets)
      nets.push_back(c == 1.0 ? n : net_lin_comb(c, n, 0.0, n));
    return nets;
  };
  for (const auto& ia : a.items_) {
    if (const TestObjectAssignment* ib = b.find(*ia.E)) {
      if (cb == 0.0) {
        out.assign(ia.E, scaled(ca, ia));
        continue;
      }
      std::vector<VectorOpNet> nets;
      for (size_t ch = 0; ch < ia.nets.size(); ++ch)
        nets.push_back(net_lin_comb(ca, ia.nets[ch], cb, ib->nets[ch]));
      out.assign(ia.E, std::move(nets));
    } else {
      out.assign(ia.E, scaled(ca, ia));
    }
  }
  for (const auto& ib : b.items_)
    if (!a.find(*ib.E)) out.assign(ib.E, scaled(cb, ib));
  return out;
}

PhiFamily mollifier_family(std::shared_ptr<const Bundle> E, const Mollifier& rho) {
  const ChartedManifold& M = E->base();
  std::vector<VectorOpNet> nets;
  for (int ch = 0; ch < M.charts(); ++ch)
    nets.push_back(VectorOpNet::mollifier_net(rho, M.chart_box(ch), E->fiber_dim()));
  PhiFamily out;
  out.assign(std::move(E), std::move(nets));
  return out;
}

// ---------------------------------------------------------------------------
// EvalSection

std::vector<double> EvalSection::values(int chart, const Box& K, int per_axis, int k,
                                        const MIdx& alpha) const {
  const Field f = comp[chart][k].d(alpha);
  std::vector<double> out;
  for (const Pt& p : grid_points(K, per_axis)) out.push_back(f.eval(p));
  return out;
}

double EvalSection::sup_norm(int chart, const Box& K, int per_axis, int derivs) const {
  double s = 0;
  std::vector<Pt> pts = grid_points(K, per_axis);
  for (const Field& f : comp[chart])
    for (const MIdx& a : midx_upto(K.n, derivs)) {
      Field g = f.d(a);
      for (const Pt& p : pts) s = std::max(s, std::fabs(g.eval(p)));
    }
  return s;
}

// ---------------------------------------------------------------------------
// Node structure

struct GenConnection::Impl {
  enum class Kind { Smooth, Affine, Metric };
  Kind kind = Kind::Smooth;
  std::shared_ptr<const ChartedManifold> M;
  std::optional<SmoothConnection> c0;
  std::vector<std::vector<Field>> gamma0;  // cached coefficient fields of c0
  std::optional<GenSection> S;             // Affine difference tensor
  std::optional<GenSection> g;             // Metric
};

struct GenNode {
  enum class Kind {
    Embed,
    Smooth,
    Tensor,
    Contract,
    ScalarMul,
    LinComb,
    LieHat,
    LieTilde,
    CovD,
    Push
  };
  Kind kind;
  std::shared_ptr<const Bundle> E;
  std::vector<GenSection> kids;
  std::vector<double> coeff;                 // LinComb
  std::optional<DistributionalSection> dist; // Embed
  std::optional<SmoothSection> sec;          // Smooth payload, or LieHat direction field
  int up_slot = -1, down_slot = -1;          // Contract
  std::shared_ptr<const GenConnection::Impl> conn;  // CovD
  std::optional<BundleIso> iso;              // Push
  std::map<std::string, int> degree;         // per bundle key
  std::vector<std::shared_ptr<const Bundle>> deps;  // sorted by key
  bool poly = true;

  static GenSection wrap(std::shared_ptr<const GenNode> nd) {
    return GenSection(std::move(nd));
  }
  static const std::shared_ptr<const GenConnection::Impl>& conn_impl(const GenConnection& c) {
    return c.impl_;
  }
};

namespace {

using Kind = GenNode::Kind;
using FieldMat = std::vector<std::vector<Field>>;

FieldMat zeros_like(const Bundle& E) {
  return FieldMat(E.base().charts(), std::vector<Field>(E.fiber_dim()));
}

bool mat_zero(const FieldMat& m) {
  for (const auto& ch : m)
    for (const Field& f : ch)
      if (!f.is_zero()) return false;
  return true;
}

void mat_acc(std::vector<std::vector<std::vector<Field>>>& acc, const FieldMat& t, double c = 1.0) {
  for (size_t ch = 0; ch < t.size(); ++ch)
    for (size_t k = 0; k < t[ch].size(); ++k) {
      const Field& f = t[ch][k];
      if (f.is_zero()) continue;
      acc[ch][k].push_back(c == 1.0 ? f : Field::scale(c, f));
    }
}

FieldMat mat_collect(std::vector<std::vector<std::vector<Field>>>&& acc) {
  FieldMat out(acc.size());
  for (size_t ch = 0; ch < acc.size(); ++ch) {
    out[ch].resize(acc[ch].size());
    for (size_t k = 0; k < acc[ch].size(); ++k) out[ch][k] = Field::sum(std::move(acc[ch][k]));
  }
  return out;
}

std::vector<std::vector<std::vector<Field>>> acc_like(const Bundle& E) {
  return std::vector<std::vector<std::vector<Field>>>(
      E.base().charts(), std::vector<std::vector<Field>>(E.fiber_dim()));
}

// All maps {0..j-1} -> {0..k-1}: which slot each direction lands in.
std::vector<std::vector<int>> slot_assignments(int j, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(j, 0);
  while (true) {
    out.push_back(cur);
    int i = j - 1;
    while (i >= 0 && cur[i] == k - 1) cur[i--] = 0;
    if (i < 0) break;
    ++cur[i];
  }
  return out;
}

bool scalar_components(const Bundle& E) { return !E.is_tensor(); }

// Lie derivative of evaluated components; trivial multi-component bundles are
// treated as tuples of scalars.
FieldMat lie_mat(const FieldMat& X, const FieldMat& R, const Bundle& E) {
  int n = E.base().n();
  FieldMat out(R.size());
  for (size_t ch = 0; ch < R.size(); ++ch) {
    if (scalar_components(E)) {
      for (const Field& f : R[ch])
        out[ch].push_back(field_lie(X[ch], {f}, {}, n)[0]);
    } else {
      out[ch] = field_lie(X[ch], R[ch], E.variance(), n);
    }
  }
  return out;
}

FieldMat covderiv_mat(const FieldMat& gamma, const FieldMat& X, const FieldMat& R,
                      const Bundle& E) {
  int n = E.base().n();
  FieldMat out(R.size());
  for (size_t ch = 0; ch < R.size(); ++ch) {
    if (scalar_components(E)) {
      for (const Field& f : R[ch])
        out[ch].push_back(field_covderiv(gamma[ch], X[ch], {f}, {}, n)[0]);
    } else {
      out[ch] = field_covderiv(gamma[ch], X[ch], R[ch], E.variance(), n);
    }
  }
  return out;
}

FieldMat covderiv_gamma_mat(const FieldMat& gamma, const FieldMat& X, const FieldMat& R,
                            const Bundle& E) {
  int n = E.base().n();
  FieldMat out(R.size());
  for (size_t ch = 0; ch < R.size(); ++ch) {
    if (scalar_components(E)) {
      out[ch].assign(R[ch].size(), Field());
    } else {
      out[ch] = field_covderiv_gamma(gamma[ch], X[ch], R[ch], E.variance(), n);
    }
  }
  return out;
}

FieldMat tensor_mat(const FieldMat& A, const FieldMat& B, int mb) {
  FieldMat out(A.size());
  for (size_t ch = 0; ch < A.size(); ++ch) {
    out[ch].resize(A[ch].size() * mb);
    for (size_t K = 0; K < A[ch].size(); ++K)
      for (int L = 0; L < mb; ++L) out[ch][K * mb + L] = A[ch][K] * B[ch][L];
  }
  return out;
}

FieldMat contract_mat(const FieldMat& S, const std::vector<bool>& up, int n, int s1, int s2) {
  int p = int(up.size());
  int mout = ipow(n, p - 2);
  FieldMat out(S.size());
  for (size_t ch = 0; ch < S.size(); ++ch) {
    out[ch].resize(mout);
    for (int K = 0; K < mout; ++K) {
      std::vector<int> dr = unflat(K, p - 2, n);
      std::vector<Field> terms;
      for (int i = 0; i < n; ++i) {
        std::vector<int> full;
        size_t next = 0;
        for (int a = 0; a < p; ++a)
          full.push_back(a == s1 || a == s2 ? i : dr[next++]);
        terms.push_back(S[ch][reflat(full, n)]);
      }
      out[ch][K] = Field::sum(std::move(terms));
    }
  }
  return out;
}

// Variance-correction coefficient matrix C with (L_X s)^K = X . grad s^K
// + sum_J C_KJ s^J; empty result means all coefficients vanish.
std::vector<std::vector<Field>> lie_variance_matrix(const std::vector<Field>& X,
                                                    const std::vector<bool>& up, int n) {
  int p = int(up.size());
  if (p == 0) return {};
  int m = ipow(n, p);
  std::vector<std::vector<std::vector<Field>>> acc(m, std::vector<std::vector<Field>>(m));
  for (int K = 0; K < m; ++K) {
    std::vector<int> d = unflat(K, p, n);
    for (int a = 0; a < p; ++a) {
      std::vector<int> sub = d;
      for (int i = 0; i < n; ++i) {
        sub[a] = i;
        int J = reflat(sub, n);
        if (up[a])
          acc[K][J].push_back(Field::scale(-1.0, X[d[a]].d(i)));
        else
          acc[K][J].push_back(X[i].d(d[a]));
      }
    }
  }
  std::vector<std::vector<Field>> C(m, std::vector<Field>(m));
  for (int K = 0; K < m; ++K)
    for (int J = 0; J < m; ++J) C[K][J] = Field::sum(std::move(acc[K][J]));
  return C;
}

FieldMat section_fields(const SmoothSection& s) {
  const Bundle& E = s.bundle();
  FieldMat out(E.base().charts());
  for (int ch = 0; ch < E.base().charts(); ++ch)
    for (int k = 0; k < E.fiber_dim(); ++k) out[ch].push_back(s.comp_field(ch, k));
  return out;
}

// L^SO_X of a whole family, taken on the listed bundles.
PhiFamily lso_family(const FieldMat& Xf, const PhiFamily& fam,
                     const std::vector<std::shared_ptr<const Bundle>>& deps) {
  PhiFamily out;
  for (const auto& dep : deps) {
    const TestObjectAssignment& item = fam.at(*dep);
    int n = dep->base().n();
    std::vector<VectorOpNet> nets;
    for (size_t ch = 0; ch < item.nets.size(); ++ch) {
      std::vector<std::vector<Field>> C;
      if (dep->is_tensor()) C = lie_variance_matrix(Xf[ch], dep->variance(), n);
      nets.push_back(lie_so(Xf[ch], item.nets[ch], C));
    }
    out.assign(dep, std::move(nets));
  }
  return out;
}

std::map<std::string, int> deg_add(const std::map<std::string, int>& a,
                                   const std::map<std::string, int>& b) {
  std::map<std::string, int> out = a;
  for (const auto& [k, v] : b) out[k] += v;
  return out;
}

std::map<std::string, int> deg_max(const std::map<std::string, int>& a,
                                   const std::map<std::string, int>& b) {
  std::map<std::string, int> out = a;
  for (const auto& [k, v] : b) {
    auto it = out.find(k);
    if (it == out.end() || it->second < v) out[k] = v;
  }
  return out;
}

void merge_deps(std::vector<std::shared_ptr<const Bundle>>& into,
                const std::vector<std::shared_ptr<const Bundle>>& other) {
  for (const auto& d : other) {
    std::string k = PhiFamily::key(*d);
    auto pos = std::lower_bound(into.begin(), into.end(), k,
                                [](const std::shared_ptr<const Bundle>& a, const std::string& s) {
                                  return PhiFamily::key(*a) < s;
                                });
    if (pos == into.end() || PhiFamily::key(**pos) != k) into.insert(pos, d);
  }
}

void check_same_base(const Bundle& a, const Bundle& b, const char* what) {
  if (a.base().id() != b.base().id())
    throw ConstructionError(std::string(what) + " needs sections over the same base (" +
                            a.base().id() + " vs " + b.base().id() + ")");
}

void check_gen_vector(const GenSection& X, const ChartedManifold& M, const char* what) {
  const Bundle& E = X.bundle();
  if (!E.is_tensor() || E.variance() != std::vector<bool>{true} || E.base().id() != M.id())
    throw ConstructionError(std::string(what) + " needs a tangent vector field");
}

void check_lie_compatible(const GenSection& r, const char* what) {
  auto ok = [](const Bundle& B) {
    return B.is_tensor() || B.id().rfind("trivial", 0) == 0;
  };
  if (!ok(r.bundle()))
    throw ConstructionError(std::string(what) + " is not defined on bundle '" +
                            r.bundle().id() + "'");
  for (const auto& dep : r.node().deps)
    if (!ok(*dep))
      throw ConstructionError(std::string(what) + " cannot transport test objects on bundle '" +
                              dep->id() + "'");
}

// Christoffel coefficient fields of a connection at one family.
FieldMat conn_gamma(const GenConnection::Impl& c, const PhiFamily& phi, double eps);

// Core recursive evaluator: the j-th differential with the given directions
// (plain evaluation for j = 0). Multilinear nodes enumerate all ways to route
// the directions into their slots.
FieldMat eval_diff(const GenNode& nd, const PhiFamily& phi,
                   const std::vector<const PhiFamily*>& dirs, double eps) {
  int j = int(dirs.size());
  const Bundle& E = *nd.E;
  int charts = E.base().charts();

  [[maybe_unused]] auto split = [&](const std::vector<int>& asn, int slot) {
    std::vector<const PhiFamily*> out;
    for (int i = 0; i < j; ++i)
      if (asn[i] == slot) out.push_back(dirs[i]);
    return out;
  };

  switch (nd.kind) {
    case Kind::Embed: {
      if (j > 1) return zeros_like(E);
      const PhiFamily& fam = j ? *dirs[0] : phi;
      const TestObjectAssignment* item = fam.find(E);
      if (!item) {
        if (j) return zeros_like(E);  // direction family leaves this bundle unperturbed
        item = &fam.at(E);            // throws with the bundle key
      }
      FieldMat out(charts);
      for (int ch = 0; ch < charts; ++ch) {
        std::vector<Distribution> u;
        for (int k = 0; k < E.fiber_dim(); ++k) u.push_back(nd.dist->comp(ch, k));
        out[ch] = item->nets[ch].act(eps, u);
      }
      return out;
    }

    case Kind::Smooth:
      return j == 0 ? section_fields(*nd.sec) : zeros_like(E);

    case Kind::LinComb: {
      auto acc = acc_like(E);
      for (size_t i = 0; i < nd.kids.size(); ++i) {
        if (nd.coeff[i] == 0.0) continue;
        FieldMat t = eval_diff(nd.kids[i].node(), phi, dirs, eps);
        mat_acc(acc, t, nd.coeff[i]);
      }
      return mat_collect(std::move(acc));
    }

    case Kind::Tensor: {
      const GenNode& a = nd.kids[0].node();
      const GenNode& b = nd.kids[1].node();
      int mb = b.E->fiber_dim();
      auto acc = acc_like(E);
      for (const auto& asn : slot_assignments(j, 2)) {
        FieldMat A = eval_diff(a, phi, split(asn, 0), eps);
        if (mat_zero(A)) continue;
        FieldMat B = eval_diff(b, phi, split(asn, 1), eps);
        if (mat_zero(B)) continue;
        mat_acc(acc, tensor_mat(A, B, mb));
      }
      return mat_collect(std::move(acc));
    }

    case Kind::ScalarMul: {
      auto acc = acc_like(E);
      for (const auto& asn : slot_assignments(j, 2)) {
        FieldMat F = eval_diff(nd.kids[0].node(), phi, split(asn, 0), eps);
        if (mat_zero(F)) continue;
        FieldMat R = eval_diff(nd.kids[1].node(), phi, split(asn, 1), eps);
        if (mat_zero(R)) continue;
        FieldMat t(charts);
        for (int ch = 0; ch < charts; ++ch)
          for (const Field& rk : R[ch]) t[ch].push_back(F[ch][0] * rk);
        mat_acc(acc, t);
      }
      return mat_collect(std::move(acc));
    }

    case Kind::Contract: {
      FieldMat S = eval_diff(nd.kids[0].node(), phi, dirs, eps);
      const Bundle& Ein = *nd.kids[0].node().E;
      return contract_mat(S, Ein.variance(), Ein.base().n(), nd.up_slot, nd.down_slot);
    }

    case Kind::LieTilde: {
      const GenNode& x = nd.kids[0].node();
      const GenNode& r = nd.kids[1].node();
      auto acc = acc_like(E);
      for (const auto& asn : slot_assignments(j, 2)) {
        FieldMat X = eval_diff(x, phi, split(asn, 0), eps);
        if (mat_zero(X)) continue;
        FieldMat R = eval_diff(r, phi, split(asn, 1), eps);
        mat_acc(acc, lie_mat(X, R, *r.E));
      }
      return mat_collect(std::move(acc));
    }

    case Kind::LieHat: {
      // d^j(L^ R) = L_X d^j R - d^{j+1} R(L^SO Phi, .) - sum_i d^j R with the
      // i-th direction replaced by L^SO Psi_i.
      const GenNode& r = nd.kids[0].node();
      FieldMat Xf = section_fields(*nd.sec);
      auto acc = acc_like(E);
      mat_acc(acc, lie_mat(Xf, eval_diff(r, phi, dirs, eps), *r.E));
      PhiFamily lso_phi = lso_family(Xf, phi, r.deps);
      std::vector<const PhiFamily*> ext = dirs;
      ext.push_back(&lso_phi);
      mat_acc(acc, eval_diff(r, phi, ext, eps), -1.0);
      std::deque<PhiFamily> keep;
      for (int i = 0; i < j; ++i) {
        keep.push_back(lso_family(Xf, *dirs[i], r.deps));
        std::vector<const PhiFamily*> rep = dirs;
        rep[i] = &keep.back();
        mat_acc(acc, eval_diff(r, phi, rep, eps), -1.0);
      }
      return mat_collect(std::move(acc));
    }

    case Kind::CovD: {
      const GenNode& x = nd.kids[0].node();
      const GenNode& r = nd.kids[1].node();
      if (j == 0) {
        FieldMat gamma = conn_gamma(*nd.conn, phi, eps);
        return covderiv_mat(gamma, eval_diff(x, phi, {}, eps), eval_diff(r, phi, {}, eps),
                            *r.E);
      }
      // Differentials only reach here for polynomial connections: the base
      // part is bilinear in (X, R), the difference part trilinear in (S, X, R).
      auto acc = acc_like(E);
      for (const auto& asn : slot_assignments(j, 2)) {
        FieldMat X = eval_diff(x, phi, split(asn, 0), eps);
        if (mat_zero(X)) continue;
        FieldMat R = eval_diff(r, phi, split(asn, 1), eps);
        if (mat_zero(R)) continue;
        mat_acc(acc, covderiv_mat(nd.conn->gamma0, X, R, *r.E));
      }
      if (nd.conn->S && !scalar_components(*r.E)) {
        const GenNode& s = nd.conn->S->node();
        for (const auto& asn : slot_assignments(j, 3)) {
          FieldMat Sm = eval_diff(s, phi, split(asn, 0), eps);
          if (mat_zero(Sm)) continue;
          FieldMat X = eval_diff(x, phi, split(asn, 1), eps);
          if (mat_zero(X)) continue;
          FieldMat R = eval_diff(r, phi, split(asn, 2), eps);
          if (mat_zero(R)) continue;
          mat_acc(acc, covderiv_gamma_mat(Sm, X, R, *r.E));
        }
      }
      return mat_collect(std::move(acc));
    }

    case Kind::Push: {
      const BundleIso& iso = *nd.iso;
      const GenNode& r = nd.kids[0].node();
      AffineMap sigma = iso.map.inverse();
      auto pull_iso = [&](int m) {
        BundleIso inv;
        inv.map = sigma;
        inv.from = iso.to;
        inv.to = iso.from;
        inv.m = m;
        if (!iso.fiber.empty() && m == iso.m) {
          for (const Expr& e : iso.fiber_inv) inv.fiber.push_back(sigma.substitute(e));
          for (const Expr& e : iso.fiber) inv.fiber_inv.push_back(sigma.substitute(e));
        }
        return inv;
      };
      auto Mto = nd.E->base_ptr();
      auto pull = [&](const PhiFamily& fam) {
        PhiFamily out;
        for (const auto& dep : r.deps) {
          auto target = Bundle::from_id(Mto, dep->id());
          const TestObjectAssignment* item = fam.find(*target);
          if (!item) {
            if (&fam == &phi) fam.at(*target);  // throws
            continue;  // direction family leaves this bundle unperturbed
          }
          out.assign(dep, {pushforward_so(pull_iso(dep->fiber_dim()), item->nets[0])});
        }
        return out;
      };
      PhiFamily pulled_phi = pull(phi);
      std::deque<PhiFamily> keep;
      std::vector<const PhiFamily*> pulled_dirs;
      for (const PhiFamily* d : dirs) {
        keep.push_back(pull(*d));
        pulled_dirs.push_back(&keep.back());
      }
      FieldMat F = eval_diff(r, pulled_phi, pulled_dirs, eps);
      std::vector<Expr> sig = sigma.exprs();
      int m = E.fiber_dim();
      FieldMat out(1);
      if (iso.fiber.empty() || m != iso.m) {
        for (int k = 0; k < m; ++k) out[0].push_back(Field::compose(F[0][k], sig));
      } else {
        for (int i = 0; i < m; ++i) {
          std::vector<Field> terms;
          for (int k = 0; k < m; ++k) {
            Field a = Field::from_expr(sigma.substitute(iso.fiber[i * m + k]));
            terms.push_back(a * Field::compose(F[0][k], sig));
          }
          out[0].push_back(Field::sum(std::move(terms)));
        }
      }
      return out;
    }
  }
  throw ConstructionError("unhandled node kind");
}

FieldMat conn_gamma(const GenConnection::Impl& c, const PhiFamily& phi, double eps) {
  using CK = GenConnection::Impl::Kind;
  if (c.kind == CK::Smooth) return c.gamma0;
  if (c.kind == CK::Affine) {
    FieldMat S = eval_diff(c.S->node(), phi, {}, eps);
    FieldMat out(c.gamma0.size());
    for (size_t ch = 0; ch < c.gamma0.size(); ++ch)
      for (size_t e = 0; e < c.gamma0[ch].size(); ++e)
        out[ch].push_back(c.gamma0[ch][e] + S[ch][e]);
    return out;
  }
  // Metric: Koszul formula through the pointwise inverse.
  FieldMat gm = eval_diff(c.g->node(), phi, {}, eps);
  int n = c.M->n();
  FieldMat out(gm.size());
  for (size_t ch = 0; ch < gm.size(); ++ch) {
    auto shared = std::make_shared<const std::vector<Field>>(gm[ch]);
    auto inv = [&](int r, int cc) { return Field(std::make_shared<MatInvField>(shared, n, r, cc)); };
    out[ch].resize(n * n * n);
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          std::vector<Field> terms;
          for (int l = 0; l < n; ++l)
            terms.push_back(inv(k, l) *
                            Field::sum({gm[ch][j * n + l].d(i), gm[ch][i * n + l].d(j),
                                        Field::scale(-1.0, gm[ch][i * n + j].d(l))}));
          out[ch][(k * n + i) * n + j] = Field::scale(0.5, Field::sum(std::move(terms)));
        }
  }
  return out;
}

std::shared_ptr<GenNode> new_node(Kind k) {
  auto nd = std::make_shared<GenNode>();
  nd->kind = k;
  return nd;
}

GenSection wrap(std::shared_ptr<GenNode> nd) { return GenNode::wrap(std::move(nd)); }

}  // namespace

// ---------------------------------------------------------------------------
// GenSection factories

GenSection GenSection::embed(DistributionalSection u) {
  auto nd = new_node(Kind::Embed);
  nd->E = u.bundle_ptr();
  nd->degree[PhiFamily::key(*nd->E)] = 1;
  nd->deps = {nd->E};
  nd->dist = std::move(u);
  return wrap(std::move(nd));
}

GenSection GenSection::smooth(SmoothSection s) {
  auto nd = new_node(Kind::Smooth);
  nd->E = s.bundle_ptr();
  nd->sec = std::move(s);
  return wrap(std::move(nd));
}

GenSection GenSection::tensor(const GenSection& a, const GenSection& b) {
  if (!a.valid() || !b.valid()) throw ConstructionError("tensor of empty sections");
  check_same_base(a.bundle(), b.bundle(), "tensor product");
  if (!a.bundle().is_tensor() || !b.bundle().is_tensor())
    throw ConstructionError("tensor product needs tensor bundles");
  std::vector<bool> up = a.bundle().variance();
  const std::vector<bool>& ub = b.bundle().variance();
  up.insert(up.end(), ub.begin(), ub.end());
  auto nd = new_node(Kind::Tensor);
  nd->E = Bundle::tensor_pattern(a.bundle().base_ptr(), up);
  nd->kids = {a, b};
  nd->degree = deg_add(a.node().degree, b.node().degree);
  nd->deps = a.node().deps;
  merge_deps(nd->deps, b.node().deps);
  nd->poly = a.node().poly && b.node().poly;
  return wrap(std::move(nd));
}

GenSection GenSection::contract(const GenSection& r, int up_slot, int down_slot) {
  if (!r.valid()) throw ConstructionError("contraction of an empty section");
  const Bundle& E = r.bundle();
  if (!E.is_tensor()) throw ConstructionError("contraction needs a tensor bundle");
  const std::vector<bool>& up = E.variance();
  int p = int(up.size());
  if (up_slot < 0 || up_slot >= p || down_slot < 0 || down_slot >= p || up_slot == down_slot)
    throw ConstructionError("contraction slots out of range");
  if (!up[up_slot] || up[down_slot])
    throw ConstructionError("contraction needs one contravariant and one covariant slot");
  std::vector<bool> rest;
  for (int a = 0; a < p; ++a)
    if (a != up_slot && a != down_slot) rest.push_back(up[a]);
  auto nd = new_node(Kind::Contract);
  nd->E = Bundle::tensor_pattern(E.base_ptr(), rest);
  nd->kids = {r};
  nd->up_slot = up_slot;
  nd->down_slot = down_slot;
  nd->degree = r.node().degree;
  nd->deps = r.node().deps;
  nd->poly = r.node().poly;
  return wrap(std::move(nd));
}

GenSection GenSection::scalar_mul(const GenSection& f, const GenSection& r) {
  if (!f.valid() || !r.valid()) throw ConstructionError("scalar multiple of empty sections");
  check_same_base(f.bundle(), r.bundle(), "scalar multiplication");
  if (f.bundle().fiber_dim() != 1 || !f.bundle().is_tensor() ||
      !f.bundle().variance().empty())
    throw ConstructionError("scalar multiplier must be a scalar generalized function");
  auto nd = new_node(Kind::ScalarMul);
  nd->E = r.bundle_ptr();
  nd->kids = {f, r};
  nd->degree = deg_add(f.node().degree, r.node().degree);
  nd->deps = f.node().deps;
  merge_deps(nd->deps, r.node().deps);
  nd->poly = f.node().poly && r.node().poly;
  return wrap(std::move(nd));
}

GenSection GenSection::lin_comb(std::vector<double> c, std::vector<GenSection> rs) {
  if (rs.empty() || c.size() != rs.size())
    throw ConstructionError("linear combination needs matching coefficients and sections");
  for (const GenSection& r : rs) {
    if (!r.valid()) throw ConstructionError("linear combination of an empty section");
    if (PhiFamily::key(r.bundle()) != PhiFamily::key(rs[0].bundle()))
      throw ConstructionError("linear combination needs sections of one bundle");
  }
  auto nd = new_node(Kind::LinComb);
  nd->E = rs[0].bundle_ptr();
  nd->coeff = std::move(c);
  for (const GenSection& r : rs) {
    nd->degree = deg_max(nd->degree, r.node().degree);
    merge_deps(nd->deps, r.node().deps);
    nd->poly = nd->poly && r.node().poly;
  }
  nd->kids = std::move(rs);
  return wrap(std::move(nd));
}

GenSection GenSection::lie_hat(SmoothSection X, const GenSection& r) {
  if (!r.valid()) throw ConstructionError("Lie derivative of an empty section");
  const ChartedManifold& M = r.bundle().base();
  const Bundle& EX = X.bundle();
  if (!EX.is_tensor() || EX.variance() != std::vector<bool>{true} || EX.base().id() != M.id())
    throw ConstructionError("Lie derivative needs a smooth tangent vector field");
  check_lie_compatible(r, "Lie derivative");
  auto nd = new_node(Kind::LieHat);
  nd->E = r.bundle_ptr();
  nd->kids = {r};
  nd->sec = std::move(X);
  nd->degree = r.node().degree;
  nd->deps = r.node().deps;
  nd->poly = r.node().poly;
  return wrap(std::move(nd));
}

GenSection GenSection::lie_tilde(const GenSection& X, const GenSection& r) {
  if (!X.valid() || !r.valid()) throw ConstructionError("Lie derivative of empty sections");
  check_gen_vector(X, r.bundle().base(), "Lie derivative");
  check_lie_compatible(r, "Lie derivative");
  auto nd = new_node(Kind::LieTilde);
  nd->E = r.bundle_ptr();
  nd->kids = {X, r};
  nd->degree = deg_add(X.node().degree, r.node().degree);
  nd->deps = X.node().deps;
  merge_deps(nd->deps, r.node().deps);
  nd->poly = X.node().poly && r.node().poly;
  return wrap(std::move(nd));
}

GenSection GenSection::bracket(const GenSection& X, const GenSection& Y) {
  if (!X.valid() || !Y.valid()) throw ConstructionError("bracket of empty sections");
  check_gen_vector(X, Y.bundle().base(), "bracket");
  check_gen_vector(Y, Y.bundle().base(), "bracket");
  return lie_tilde(X, Y);
}

GenSection GenSection::pushforward(const BundleIso& iso, const GenSection& r) {
  if (!r.valid()) throw ConstructionError("pushforward of an empty section");
  const ChartedManifold& M = r.bundle().base();
  if (M.charts() != 1)
    throw ConstructionError("pushforward needs a single-chart base");
  if (!box_same(M.chart_box(0), iso.from))
    throw ConstructionError("pushforward domain " + iso.from.str() +
                            " does not match the base chart " + M.chart_box(0).str());
  auto Mto = ChartedManifold::box(iso.to);
  auto check_fiber = [&](const Bundle& B) {
    if (!iso.fiber.empty() && B.fiber_dim() != 1 && B.fiber_dim() != iso.m)
      throw ConstructionError("pushforward fiber matrix size " + std::to_string(iso.m) +
                              " does not fit bundle '" + B.id() + "'");
  };
  check_fiber(r.bundle());
  auto nd = new_node(Kind::Push);
  nd->E = Bundle::from_id(Mto, r.bundle().id());
  nd->kids = {r};
  nd->iso = iso;
  for (const auto& dep : r.node().deps) {
    check_fiber(*dep);
    auto target = Bundle::from_id(Mto, dep->id());
    nd->degree[PhiFamily::key(*target)] = r.degree(*dep);
    merge_deps(nd->deps, {target});
  }
  nd->poly = r.node().poly;
  return wrap(std::move(nd));
}

// ---------------------------------------------------------------------------
// GenSection accessors and evaluation

const Bundle& GenSection::bundle() const { return *node_->E; }
const std::shared_ptr<const Bundle>& GenSection::bundle_ptr() const { return node_->E; }

std::vector<std::string> GenSection::index_set() const {
  std::vector<std::string> out;
  for (const auto& dep : node_->deps) out.push_back(PhiFamily::key(*dep));
  return out;
}

int GenSection::degree(const Bundle& G) const {
  auto it = node_->degree.find(PhiFamily::key(G));
  return it == node_->degree.end() ? 0 : it->second;
}

int GenSection::total_degree() const {
  int s = 0;
  for (const auto& [k, v] : node_->degree) s += v;
  return s;
}

bool GenSection::polynomial() const { return node_->poly; }

EvalSection GenSection::evaluate(const PhiFamily& phi, double eps) const {
  if (!valid()) throw ConstructionError("evaluation of an empty section");
  for (const auto& dep : node_->deps) phi.at(*dep);
  EvalSection out;
  out.E = node_->E;
  out.eps = eps;
  out.comp = eval_diff(*node_, phi, {}, eps);
  return out;
}

namespace {

bool family_identity_equal(const PhiFamily& a, const PhiFamily& b) {
  if (a.items().size() != b.items().size()) return false;
  for (size_t i = 0; i < a.items().size(); ++i) {
    const auto& ia = a.items()[i];
    const auto& ib = b.items()[i];
    if (PhiFamily::key(*ia.E) != PhiFamily::key(*ib.E)) return false;
    for (size_t ch = 0; ch < ia.nets.size(); ++ch)
      if (ia.nets[ch].identity() != ib.nets[ch].identity()) return false;
  }
  return true;
}

// Weights w with sum_k w_k f(t_k) = j! c_j of the interpolating polynomial.
std::vector<double> deriv_weights(const std::vector<double>& t, int j) {
  int npts = int(t.size());
  Eigen::MatrixXd V(npts, npts);
  for (int k = 0; k < npts; ++k) {
    double p = 1;
    for (int m = 0; m < npts; ++m) {
      V(k, m) = p;
      p *= t[k];
    }
  }
  Eigen::VectorXd e = Eigen::VectorXd::Zero(npts);
  e(j) = 1;
  Eigen::VectorXd w = V.transpose().fullPivLu().solve(e);
  double fact = 1;
  for (int i = 2; i <= j; ++i) fact *= i;
  std::vector<double> out(npts);
  for (int k = 0; k < npts; ++k) out[k] = fact * w(k);
  return out;
}

EvalSection weighted_evals(const GenSection& r, const PhiFamily& phi, const PhiFamily& psi,
                           const std::vector<double>& t, const std::vector<double>& w,
                           double eps) {
  EvalSection out;
  out.E = r.bundle_ptr();
  out.eps = eps;
  auto acc = acc_like(r.bundle());
  for (size_t k = 0; k < t.size(); ++k) {
    if (w[k] == 0.0) continue;
    PhiFamily fam = t[k] == 0.0 ? phi : PhiFamily::lin_comb(1.0, phi, t[k], psi);
    mat_acc(acc, r.evaluate(fam, eps).comp, w[k]);
  }
  out.comp = mat_collect(std::move(acc));
  return out;
}

}  // namespace

EvalSection GenSection::differential(const PhiFamily& phi, const std::vector<PhiFamily>& dirs,
                                     double eps) const {
  if (dirs.empty()) return evaluate(phi, eps);
  if (!valid()) throw ConstructionError("differential of an empty section");
  for (const auto& dep : node_->deps) phi.at(*dep);
  int j = int(dirs.size());
  if (!node_->poly) {
    // Rules are incomplete past metric connections; fall back to a finite
    // difference in the perturbation parameter, which needs one repeated
    // direction.
    for (int i = 1; i < j; ++i)
      if (!family_identity_equal(dirs[0], dirs[i]))
        throw ConstructionError(
            "differential of a non-polynomial section needs identical directions");
    int npts = j + 5;
    if (npts % 2 == 0) ++npts;
    double h = 0.05;
    std::vector<double> t(npts);
    for (int k = 0; k < npts; ++k) t[k] = h * (k - (npts - 1) / 2);
    return weighted_evals(*this, phi, dirs[0], t, deriv_weights(t, j), eps);
  }
  std::vector<const PhiFamily*> dp;
  for (const PhiFamily& d : dirs) dp.push_back(&d);
  EvalSection out;
  out.E = node_->E;
  out.eps = eps;
  out.comp = eval_diff(*node_, phi, dp, eps);
  return out;
}

EvalSection differential_interp(const GenSection& r, int j, const PhiFamily& phi,
                                const PhiFamily& psi, double eps) {
  if (!r.valid()) throw ConstructionError("differential of an empty section");
  if (j < 0) throw ConstructionError("differential order must be non-negative");
  std::vector<double> t;
  if (r.polynomial()) {
    int npts = std::max(r.total_degree(), j) + 1;
    for (int k = 0; k < npts; ++k) t.push_back(double(k));
  } else {
    int npts = j + 5;
    if (npts % 2 == 0) ++npts;
    double h = 0.05;
    for (int k = 0; k < npts; ++k) t.push_back(h * (k - (npts - 1) / 2));
  }
  return weighted_evals(r, phi, psi, t, deriv_weights(t, j), eps);
}

// ---------------------------------------------------------------------------
// GenConnection

GenConnection GenConnection::smooth(SmoothConnection c) {
  auto impl = std::make_shared<Impl>();
  impl->kind = Impl::Kind::Smooth;
  impl->M = c.base_ptr();
  int n = impl->M->n();
  impl->gamma0.resize(impl->M->charts());
  for (int ch = 0; ch < impl->M->charts(); ++ch)
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          impl->gamma0[ch].push_back(Field::from_expr(c.christoffel(ch, k, i, j)));
  impl->c0 = std::move(c);
  GenConnection out;
  out.impl_ = std::move(impl);
  return out;
}

GenConnection GenConnection::affine(SmoothConnection c, GenSection S) {
  GenConnection out = smooth(std::move(c));
  auto impl = std::make_shared<Impl>(*out.impl_);
  impl->kind = Impl::Kind::Affine;
  if (!S.valid()) throw ConstructionError("difference tensor is empty");
  const Bundle& ES = S.bundle();
  if (!ES.is_tensor() || ES.variance() != std::vector<bool>{true, false, false} ||
      ES.base().id() != impl->M->id())
    throw ConstructionError(
        "difference tensor must be Christoffel-shaped (one contravariant, two covariant "
        "slots) over the connection base");
  impl->S = std::move(S);
  out.impl_ = std::move(impl);
  return out;
}

GenConnection GenConnection::metric_lc(GenSection g) {
  if (!g.valid()) throw ConstructionError("metric is empty");
  const Bundle& E = g.bundle();
  if (!E.is_tensor() || E.variance() != std::vector<bool>{false, false})
    throw ConstructionError("Levi-Civita needs a metric (two covariant slots)");
  auto impl = std::make_shared<Impl>();
  impl->kind = Impl::Kind::Metric;
  impl->M = E.base_ptr();
  impl->g = std::move(g);
  GenConnection out;
  out.impl_ = std::move(impl);
  return out;
}

const ChartedManifold& GenConnection::base() const { return *impl_->M; }
const std::shared_ptr<const ChartedManifold>& GenConnection::base_ptr() const {
  return impl_->M;
}

bool GenConnection::polynomial() const {
  switch (impl_->kind) {
    case Impl::Kind::Smooth:
      return true;
    case Impl::Kind::Affine:
      return impl_->S->polynomial();
    case Impl::Kind::Metric:
      return false;
  }
  return false;
}

const std::optional<GenSection>& GenConnection::difference() const { return impl_->S; }
const std::optional<GenSection>& GenConnection::metric() const { return impl_->g; }

std::vector<std::vector<Field>> GenConnection::christoffels(const PhiFamily& phi,
                                                            double eps) const {
  return conn_gamma(*impl_, phi, eps);
}

double metric_det_min(const EvalSection& g, int chart, const Box& K, int per_axis, Pt* worst) {
  int n = g.E->base().n();
  if (int(g.comp[chart].size()) != n * n)
    throw ConstructionError("determinant needs a square matrix of components");
  double best = 0;
  bool first = true;
  for (const Pt& p : grid_points(K, per_axis)) {
    Eigen::MatrixXd M(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) M(i, j) = g.comp[chart][i * n + j].eval(p);
    double det = M.determinant();
    if (first || det < best) {
      best = det;
      if (worst) *worst = p;
      first = false;
    }
  }
  return best;
}

void GenConnection::verify_nonsingular(const PhiFamily& phi, const std::vector<double>& eps_list,
                                       int chart, const Box& K, int per_axis, double floor,
                                       int N) const {
  if (impl_->kind != Impl::Kind::Metric) return;
  for (double eps : eps_list) {
    EvalSection gm = impl_->g->evaluate(phi, eps);
    Pt worst{};
    double det = metric_det_min(gm, chart, K, per_axis, &worst);
    double bound = floor * std::pow(eps, N);
    if (!(det >= bound))
      throw EvalError("metric determinant " + fmt_num(det) + " at x = " +
                      pt_str(worst, K.n) + " with eps = " + fmt_num(eps) +
                      " falls below " + fmt_num(floor) + " * eps^" + std::to_string(N) +
                      " = " + fmt_num(bound));
  }
}

GenSection cov_deriv(const GenConnection& conn, const GenSection& X, const GenSection& r) {
  if (!X.valid() || !r.valid()) throw ConstructionError("covariant derivative of empty sections");
  check_gen_vector(X, conn.base(), "covariant derivative");
  if (r.bundle().base().id() != conn.base().id())
    throw ConstructionError("covariant derivative needs a section over the connection base");
  check_lie_compatible(r, "covariant derivative");
  auto nd = new_node(Kind::CovD);
  nd->E = r.bundle_ptr();
  nd->kids = {X, r};
  nd->conn = GenNode::conn_impl(conn);
  nd->deps = X.node().deps;
  merge_deps(nd->deps, r.node().deps);
  nd->poly = X.node().poly && r.node().poly && conn.polynomial();
  if (nd->poly) {
    nd->degree = deg_add(X.node().degree, r.node().degree);
    if (conn.difference()) {
      merge_deps(nd->deps, conn.difference()->node().deps);
      nd->degree = deg_max(nd->degree, deg_add(conn.difference()->node().degree,
                                               deg_add(X.node().degree, r.node().degree)));
    }
  } else if (conn.metric()) {
    merge_deps(nd->deps, conn.metric()->node().deps);
  } else if (conn.difference()) {
    merge_deps(nd->deps, conn.difference()->node().deps);
  }
  return wrap(std::move(nd));
}

GenSection gen_curvature(const GenConnection& conn, const GenSection& X, const GenSection& Y,
                         const GenSection& s) {
  GenSection a = cov_deriv(conn, X, cov_deriv(conn, Y, s));
  GenSection b = cov_deriv(conn, Y, cov_deriv(conn, X, s));
  GenSection c = cov_deriv(conn, GenSection::bracket(X, Y), s);
  return GenSection::lin_comb({1.0, -1.0, -1.0}, {a, b, c});
}

GenConnection levi_civita(const GenSection& g) { return GenConnection::metric_lc(g); }

EvalSection curvature_tensor(const GenConnection& conn, const PhiFamily& phi, double eps) {
  const ChartedManifold& M = conn.base();
  int n = M.n();
  std::vector<std::vector<Field>> gamma = conn.christoffels(phi, eps);
  EvalSection out;
  out.E = Bundle::tensor_pattern(conn.base_ptr(), {true, false, false, false});
  out.eps = eps;
  out.comp.resize(M.charts());
  for (int ch = 0; ch < M.charts(); ++ch) out.comp[ch] = field_curvature(gamma[ch], n);
  return out;
}

// ---------------------------------------------------------------------------
// Pushforward of distributional sections

DistributionalSection pushforward_dist(const BundleIso& iso, const DistributionalSection& u) {
  const ChartedManifold& M = u.bundle().base();
  if (M.charts() != 1) throw ConstructionError("pushforward needs a single-chart base");
  if (!box_same(M.chart_box(0), iso.from))
    throw ConstructionError("pushforward domain " + iso.from.str() +
                            " does not match the base chart " + M.chart_box(0).str());
  int m = u.bundle().fiber_dim();
  if (!iso.fiber.empty() && m != 1 && m != iso.m)
    throw ConstructionError("pushforward fiber matrix size " + std::to_string(iso.m) +
                            " does not fit bundle '" + u.bundle().id() + "'");
  auto Mto = ChartedManifold::box(iso.to);
  auto Eto = Bundle::from_id(Mto, u.bundle().id());
  AffineMap sigma = iso.map.inverse();
  std::vector<Distribution> comps;
  if (iso.fiber.empty() || m != iso.m) {
    for (int k = 0; k < m; ++k)
      comps.push_back(affine_pullback(u.comp(0, k), sigma, iso.to));
  } else {
    for (int i = 0; i < m; ++i) {
      std::vector<Distribution> terms;
      std::vector<double> c;
      for (int k = 0; k < m; ++k) {
        terms.push_back(affine_pullback(u.comp(0, k), sigma, iso.to)
                            .mul(sigma.substitute(iso.fiber[i * m + k])));
        c.push_back(1.0);
      }
      comps.push_back(Distribution::lin_comb(c, terms));
    }
  }
  return DistributionalSection(std::move(Eto), {std::move(comps)});
}

// ---------------------------------------------------------------------------
// Restriction

namespace {

GenSection restrict_node(const GenNode& nd, const Box& V,
                         const std::shared_ptr<const ChartedManifold>& Mv);

SmoothSection restrict_smooth(const SmoothSection& s,
                              const std::shared_ptr<const ChartedManifold>& Mv) {
  auto Ev = Bundle::from_id(Mv, s.bundle().id());
  std::vector<std::vector<Expr>> comps(1);
  for (int k = 0; k < s.bundle().fiber_dim(); ++k) comps[0].push_back(s.comp(0, k));
  return SmoothSection(std::move(Ev), std::move(comps));
}

SmoothConnection restrict_conn0(const SmoothConnection& c,
                                const std::shared_ptr<const ChartedManifold>& Mv) {
  int n = Mv->n();
  std::vector<std::vector<Expr>> gamma(1, std::vector<Expr>(n * n * n));
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) gamma[0][(k * n + i) * n + j] = c.christoffel(0, k, i, j);
  return SmoothConnection(Mv, std::move(gamma));
}

GenSection restrict_node(const GenNode& nd, const Box& V,
                         const std::shared_ptr<const ChartedManifold>& Mv) {
  auto rec = [&](const GenSection& kid) { return restrict_node(kid.node(), V, Mv); };
  switch (nd.kind) {
    case Kind::Embed: {
      auto Ev = Bundle::from_id(Mv, nd.E->id());
      std::vector<std::vector<Distribution>> comps(1);
      for (int k = 0; k < nd.E->fiber_dim(); ++k)
        comps[0].push_back(nd.dist->comp(0, k).restricted(V));
      return GenSection::embed(DistributionalSection(std::move(Ev), std::move(comps)));
    }
    case Kind::Smooth:
      return GenSection::smooth(restrict_smooth(*nd.sec, Mv));
    case Kind::Tensor:
      return GenSection::tensor(rec(nd.kids[0]), rec(nd.kids[1]));
    case Kind::Contract:
      return GenSection::contract(rec(nd.kids[0]), nd.up_slot, nd.down_slot);
    case Kind::ScalarMul:
      return GenSection::scalar_mul(rec(nd.kids[0]), rec(nd.kids[1]));
    case Kind::LinComb: {
      std::vector<GenSection> kids;
      for (const GenSection& k : nd.kids) kids.push_back(rec(k));
      return GenSection::lin_comb(nd.coeff, std::move(kids));
    }
    case Kind::LieHat:
      return GenSection::lie_hat(restrict_smooth(*nd.sec, Mv), rec(nd.kids[0]));
    case Kind::LieTilde:
      return GenSection::lie_tilde(rec(nd.kids[0]), rec(nd.kids[1]));
    case Kind::CovD: {
      using CK = GenConnection::Impl::Kind;
      GenConnection conn;
      if (nd.conn->kind == CK::Smooth)
        conn = GenConnection::smooth(restrict_conn0(*nd.conn->c0, Mv));
      else if (nd.conn->kind == CK::Affine)
        conn = GenConnection::affine(restrict_conn0(*nd.conn->c0, Mv),
                                     restrict_node(nd.conn->S->node(), V, Mv));
      else
        conn = GenConnection::metric_lc(restrict_node(nd.conn->g->node(), V, Mv));
      return cov_deriv(conn, rec(nd.kids[0]), rec(nd.kids[1]));
    }
    case Kind::Push:
      throw ConstructionError("restriction across a pushforward is not supported");
  }
  throw ConstructionError("unhandled node kind");
}

}  // namespace

GenSection GenSection::restricted(const Box& V) const {
  if (!valid()) throw ConstructionError("restriction of an empty section");
  const ChartedManifold& M = bundle().base();
  if (M.charts() != 1) throw ConstructionError("restriction needs a single-chart base");
  const Box& U = M.chart_box(0);
  if (V.empty() || !box_covers(U, V))
    throw ConstructionError("restriction target " + V.str() + " must sit inside " + U.str());
  return restrict_node(*node_, V, ChartedManifold::box(V));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '\\')
      o += "\\\\";
    else if (c == '\n')
      o += "\\n";
    else if (c == '#')
      o += "\\h";
    else
      o += c;
  }
  return o;
}

std::string unesc(const std::string& s, int line) {
  std::string o;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      o += s[i];
      continue;
    }
    if (++i == s.size()) throw ConfigError("dangling escape", line, 1);
    switch (s[i]) {
      case '\\': o += '\\'; break;
      case 'n': o += '\n'; break;
      case 'h': o += '#'; break;
      default: throw ConfigError(std::string("bad escape '\\") + s[i] + "'", line, 1);
    }
  }
  return o;
}

void check_serializable(const GenNode& nd) {
  const std::string& bid = nd.E->id();
  if (bid != "tangent" && bid.rfind("trivial ", 0) != 0 && bid.rfind("tensor", 0) != 0)
    throw ConstructionError("bundle '" + bid + "' has no serializable identity");
  const std::string& mid = nd.E->base().id();
  if (mid != "circle" && mid != "torus" && mid.rfind("box", 0) != 0)
    throw ConstructionError("base '" + mid + "' has no serializable identity");
}

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Embed: return "embed";
    case Kind::Smooth: return "smooth";
    case Kind::Tensor: return "tensor";
    case Kind::Contract: return "contract";
    case Kind::ScalarMul: return "scalar";
    case Kind::LinComb: return "lincomb";
    case Kind::LieHat: return "liehat";
    case Kind::LieTilde: return "lietilde";
    case Kind::CovD: return "covd";
    case Kind::Push: return "push";
  }
  return "?";
}

std::string join_nums(const double* v, int count) {
  std::string s;
  for (int i = 0; i < count; ++i) s += (i ? " " : "") + fmt_num(v[i]);
  return s;
}

std::string join_exprs(const std::vector<Expr>& es) {
  std::string s;
  for (size_t i = 0; i < es.size(); ++i) s += (i ? "; " : "") + es[i].str();
  return s;
}

struct NodeWriter {
  std::ostringstream os;
  int count = 0;

  int walk(const GenNode& nd) {
    check_serializable(nd);
    std::vector<const GenNode*> extra;  // connection payload sections
    int my = count++;
    std::ostringstream body;
    body << "[node " << my << "]\n";
    body << "kind = " << kind_name(nd.kind) << "\n";
    std::vector<int> kid_ids;
    std::ostringstream tail;
    switch (nd.kind) {
      case Kind::Embed:
        tail << "payload = " << esc(nd.dist->serialize()) << "\n";
        break;
      case Kind::Smooth:
        tail << "payload = " << esc(nd.sec->serialize()) << "\n";
        break;
      case Kind::LieHat:
        tail << "x = " << esc(nd.sec->serialize()) << "\n";
        break;
      case Kind::Contract:
        tail << "up = " << nd.up_slot << "\ndown = " << nd.down_slot << "\n";
        break;
      case Kind::LinComb: {
        std::string cs;
        for (size_t i = 0; i < nd.coeff.size(); ++i)
          cs += (i ? ", " : "") + fmt_num(nd.coeff[i]);
        tail << "coeffs = " << cs << "\n";
        break;
      }
      case Kind::CovD: {
        using CK = GenConnection::Impl::Kind;
        const auto& c = *nd.conn;
        tail << "conn = "
             << (c.kind == CK::Smooth ? "smooth" : c.kind == CK::Affine ? "affine" : "metric")
             << "\n";
        if (c.kind != CK::Metric) {
          tail << "base = " << c.M->id() << "\n";
          int n = c.M->n();
          for (int ch = 0; ch < c.M->charts(); ++ch) {
            std::vector<Expr> es;
            for (int k = 0; k < n; ++k)
              for (int i = 0; i < n; ++i)
                for (int jj = 0; jj < n; ++jj) es.push_back(c.c0->christoffel(ch, k, i, jj));
            tail << "gamma_" << ch << " = " << join_exprs(es) << "\n";
          }
        }
        if (c.kind == CK::Affine) extra.push_back(&c.S->node());
        if (c.kind == CK::Metric) extra.push_back(&c.g->node());
        break;
      }
      case Kind::Push: {
        const BundleIso& iso = *nd.iso;
        int n = iso.from.n;
        std::vector<double> a;
        for (int r = 0; r < n; ++r)
          for (int cc = 0; cc < n; ++cc) a.push_back(iso.map.A[r * kMaxDim + cc]);
        tail << "dim = " << n << "\n";
        tail << "map_a = " << join_nums(a.data(), n * n) << "\n";
        tail << "map_b = " << join_nums(iso.map.b.data(), n) << "\n";
        tail << "from_lo = " << join_nums(iso.from.lo.data(), n) << "\n";
        tail << "from_hi = " << join_nums(iso.from.hi.data(), n) << "\n";
        tail << "to_lo = " << join_nums(iso.to.lo.data(), n) << "\n";
        tail << "to_hi = " << join_nums(iso.to.hi.data(), n) << "\n";
        tail << "m = " << iso.m << "\n";
        if (!iso.fiber.empty()) {
          tail << "fiber = " << join_exprs(iso.fiber) << "\n";
          tail << "fiber_inv = " << join_exprs(iso.fiber_inv) << "\n";
        }
        break;
      }
      default:
        break;
    }
    for (const GenSection& kid : nd.kids) kid_ids.push_back(walk(kid.node()));
    for (const GenNode* e : extra) kid_ids.push_back(walk(*e));
    if (!kid_ids.empty()) {
      std::string ks;
      for (size_t i = 0; i < kid_ids.size(); ++i)
        ks += (i ? ", " : "") + std::to_string(kid_ids[i]);
      body << "kids = " << ks << "\n";
    }
    body << tail.str();
    os << body.str();
    return my;
  }
};

Kind kind_from(const std::string& s, int line) {
  static const std::pair<const char*, Kind> tab[] = {
      {"embed", Kind::Embed},       {"smooth", Kind::Smooth},   {"tensor", Kind::Tensor},
      {"contract", Kind::Contract}, {"scalar", Kind::ScalarMul}, {"lincomb", Kind::LinComb},
      {"liehat", Kind::LieHat},     {"lietilde", Kind::LieTilde}, {"covd", Kind::CovD},
      {"push", Kind::Push}};
  for (const auto& [name, k] : tab)
    if (s == name) return k;
  throw ConfigError("unknown node kind '" + s + "'", line, 1);
}

std::vector<Expr> parse_expr_list(const std::string& s, int line) {
  std::vector<Expr> out;
  for (const std::string& part : split_list(s, ';')) {
    if (part.empty()) throw ConfigError("empty expression in list", line, 1);
    out.push_back(parse_expr(part));
  }
  return out;
}

std::vector<double> parse_num_list(const std::string& s, int line, int expect) {
  std::istringstream is(s);
  std::vector<double> out;
  double v;
  while (is >> v) out.push_back(v);
  if (int(out.size()) != expect)
    throw ConfigError("expected " + std::to_string(expect) + " numbers", line, 1);
  return out;
}

}  // namespace

std::string GenSection::serialize() const {
  if (!valid()) throw ConstructionError("serialization of an empty section");
  NodeWriter w;
  std::ostringstream header;
  w.walk(*node_);
  header << "[gensec]\nversion = 1\nnodes = " << w.count << "\n";
  return header.str() + w.os.str();
}

GenSection GenSection::deserialize(const std::string& text) {
  std::vector<TextSection> secs = parse_sections(text);
  if (secs.empty() || secs[0].name != "gensec")
    throw ConfigError("expected a [gensec] header", secs.empty() ? 1 : secs[0].line, 1);
  int count = parse_int(secs[0].get("nodes"), secs[0].line);
  if (int(secs.size()) != count + 1)
    throw ConfigError("expected " + std::to_string(count) + " node sections", secs[0].line, 1);
  std::vector<const TextSection*> nodes(count, nullptr);
  for (int i = 1; i <= count; ++i) {
    const TextSection& s = secs[i];
    std::istringstream is(s.name);
    std::string word;
    int idx = -1;
    is >> word >> idx;
    if (word != "node" || idx < 0 || idx >= count || nodes[idx])
      throw ConfigError("bad node section [" + s.name + "]", s.line, 1);
    nodes[idx] = &s;
  }
  std::vector<GenSection> built(count);
  for (int idx = count - 1; idx >= 0; --idx) {
    const TextSection& s = *nodes[idx];
    Kind kind = kind_from(s.get("kind"), s.line);
    std::vector<GenSection> kids;
    if (s.has("kids"))
      for (const std::string& k : split_list(s.get("kids"))) {
        int ki = parse_int(k, s.line);
        if (ki <= idx || ki >= count || !built[ki].valid())
          throw ConfigError("node " + std::to_string(idx) + " references bad kid " + k,
                            s.line, 1);
        kids.push_back(built[ki]);
      }
    auto want_kids = [&](size_t n) {
      if (kids.size() != n)
        throw ConfigError("node " + std::to_string(idx) + " needs " + std::to_string(n) +
                              " kids",
                          s.line, 1);
    };
    switch (kind) {
      case Kind::Embed:
        want_kids(0);
        built[idx] = embed(DistributionalSection::deserialize(unesc(s.get("payload"), s.line)));
        break;
      case Kind::Smooth:
        want_kids(0);
        built[idx] = smooth(SmoothSection::deserialize(unesc(s.get("payload"), s.line)));
        break;
      case Kind::Tensor:
        want_kids(2);
        built[idx] = tensor(kids[0], kids[1]);
        break;
      case Kind::Contract:
        want_kids(1);
        built[idx] = contract(kids[0], parse_int(s.get("up"), s.line),
                              parse_int(s.get("down"), s.line));
        break;
      case Kind::ScalarMul:
        want_kids(2);
        built[idx] = scalar_mul(kids[0], kids[1]);
        break;
      case Kind::LinComb: {
        std::vector<double> c;
        for (const std::string& v : split_list(s.get("coeffs")))
          c.push_back(parse_double(v, s.line));
        built[idx] = lin_comb(std::move(c), std::move(kids));
        break;
      }
      case Kind::LieHat:
        want_kids(1);
        built[idx] =
            lie_hat(SmoothSection::deserialize(unesc(s.get("x"), s.line)), kids[0]);
        break;
      case Kind::LieTilde:
        want_kids(2);
        built[idx] = lie_tilde(kids[0], kids[1]);
        break;
      case Kind::CovD: {
        std::string ck = s.get("conn");
        if (ck == "metric") {
          want_kids(3);
          built[idx] = cov_deriv(GenConnection::metric_lc(kids[2]), kids[0], kids[1]);
          break;
        }
        auto M = ChartedManifold::named(s.get("base"));
        int n = M->n();
        std::vector<std::vector<Expr>> gamma;
        for (int ch = 0; ch < M->charts(); ++ch) {
          std::vector<Expr> es = parse_expr_list(s.get("gamma_" + std::to_string(ch)), s.line);
          if (int(es.size()) != n * n * n)
            throw ConfigError("expected " + std::to_string(n * n * n) + " coefficients",
                              s.line, 1);
          gamma.push_back(std::move(es));
        }
        SmoothConnection c0(M, std::move(gamma));
        if (ck == "smooth") {
          want_kids(2);
          built[idx] = cov_deriv(GenConnection::smooth(std::move(c0)), kids[0], kids[1]);
        } else if (ck == "affine") {
          want_kids(3);
          built[idx] =
              cov_deriv(GenConnection::affine(std::move(c0), kids[2]), kids[0], kids[1]);
        } else {
          throw ConfigError("unknown connection kind '" + ck + "'", s.line, 1);
        }
        break;
      }
      case Kind::Push: {
        want_kids(1);
        int n = parse_int(s.get("dim"), s.line);
        BundleIso iso;
        iso.map.n = n;
        std::vector<double> a = parse_num_list(s.get("map_a"), s.line, n * n);
        std::vector<double> b = parse_num_list(s.get("map_b"), s.line, n);
        for (int r = 0; r < n; ++r)
          for (int cc = 0; cc < n; ++cc) iso.map.A[r * kMaxDim + cc] = a[r * n + cc];
        for (int r = 0; r < n; ++r) iso.map.b[r] = b[r];
        auto box_from = [&](const char* lo, const char* hi) {
          Box bx;
          bx.n = n;
          std::vector<double> l = parse_num_list(s.get(lo), s.line, n);
          std::vector<double> h = parse_num_list(s.get(hi), s.line, n);
          for (int r = 0; r < n; ++r) {
            bx.lo[r] = l[r];
            bx.hi[r] = h[r];
          }
          return bx;
        };
        iso.from = box_from("from_lo", "from_hi");
        iso.to = box_from("to_lo", "to_hi");
        iso.m = parse_int(s.get("m"), s.line);
        if (s.has("fiber")) {
          iso.fiber = parse_expr_list(s.get("fiber"), s.line);
          iso.fiber_inv = parse_expr_list(s.get("fiber_inv"), s.line);
        }
        built[idx] = pushforward(iso, kids[0]);
        break;
      }
    }
  }
  return built[0];
}

}  // namespace gensec
