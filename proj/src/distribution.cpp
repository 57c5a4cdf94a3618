#include "gensec/distribution.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "gensec/errors.hpp"
#include "gensec/quadrature.hpp"
#include "gensec/text.hpp"

namespace gensec {

Region Region::guarded(const Box& b, const Expr& g) {
  return Region{b, Field::from_expr(g), g};
}

bool Region::contains(const Pt& x) const {
  for (int i = 0; i < box.n; ++i)
    if (!(x[i] > box.lo[i] && x[i] < box.hi[i])) return false;
  if (guard && !(guard->eval(x) > 0.0)) return false;
  return true;
}

bool Region::covers(const Box& b) const {
  if (guard) return false;
  for (int i = 0; i < box.n; ++i)
    if (b.lo[i] < box.lo[i] || b.hi[i] > box.hi[i]) return false;
  return true;
}

bool Region::misses(const Box& b) const { return box.intersect(b).empty(); }

Distribution Distribution::shell() const {
  Distribution d;
  d.n_ = n_;
  d.domain_ = domain_;
  return d;
}

Distribution Distribution::zero(int n, const Box& domain) {
  Distribution d;
  d.n_ = n;
  d.domain_ = domain;
  return d;
}

Distribution Distribution::delta(const Box& domain, const Pt& p, const MIdx& gamma) {
  Distribution d = zero(domain.n, domain);
  d.deltas_.push_back({1.0, p, gamma});
  return d;
}

Distribution Distribution::density(const Box& domain, const Expr& e) {
  Distribution d = zero(domain.n, domain);
  d.densities_.push_back({1.0, Region{domain, {}, {}}, Field::from_expr(e), e});
  return d;
}

Distribution Distribution::density(const Box& domain, Field f) {
  Distribution d = zero(domain.n, domain);
  d.densities_.push_back({1.0, Region{domain, {}, {}}, std::move(f), {}});
  return d;
}

Distribution Distribution::piece(const Box& domain, const Region& r, const Expr& e) {
  Distribution d = zero(domain.n, domain);
  d.densities_.push_back({1.0, r, Field::from_expr(e), e});
  return d;
}

Distribution Distribution::piece(const Box& domain, const Region& r, Field f) {
  Distribution d = zero(domain.n, domain);
  d.densities_.push_back({1.0, r, std::move(f), {}});
  return d;
}

Distribution Distribution::heaviside(const Box& domain) {
  if (domain.n != 1) throw ConstructionError("heaviside is one-dimensional");
  Box r = domain;
  r.lo[0] = std::max(0.0, domain.lo[0]);
  return piece(domain, Region{r, {}, {}}, Expr(1.0));
}

Distribution Distribution::lin_comb(const std::vector<double>& coeffs,
                                    const std::vector<Distribution>& us) {
  if (coeffs.size() != us.size() || us.empty())
    throw ConstructionError("linear combination needs matching nonempty lists");
  Distribution acc = us[0].scaled(coeffs[0]);
  for (size_t i = 1; i < us.size(); ++i) acc = acc + us[i].scaled(coeffs[i]);
  return acc;
}

int Distribution::order() const {
  int m = 0;
  for (const auto& t : deltas_) m = std::max(m, gensec::order(t.gamma));
  for (const auto& t : ops_) m = std::max(m, gensec::order(t.beta) + t.inner->order());
  return m;
}

Box Distribution::support() const {
  Box acc;
  acc.n = n_;
  bool first = true;
  auto take = [&](const Box& b) {
    if (b.empty()) return;
    if (first) {
      acc = b;
      first = false;
      return;
    }
    for (int i = 0; i < n_; ++i) {
      acc.lo[i] = std::min(acc.lo[i], b.lo[i]);
      acc.hi[i] = std::max(acc.hi[i], b.hi[i]);
    }
  };
  for (const auto& t : deltas_) take(Box::point(t.p, n_));
  for (const auto& t : densities_) take(t.region.box.intersect(domain_));
  for (const auto& t : ops_) take(t.inner->support());
  if (first) {
    acc.lo[0] = 1.0;
    acc.hi[0] = -1.0;
  }
  return acc;
}

Distribution Distribution::operator+(const Distribution& o) const {
  if (n_ != o.n_) throw ConstructionError("dimension mismatch in distribution sum");
  Distribution d = *this;
  d.domain_ = domain_.intersect(o.domain_);
  d.deltas_.insert(d.deltas_.end(), o.deltas_.begin(), o.deltas_.end());
  d.densities_.insert(d.densities_.end(), o.densities_.begin(), o.densities_.end());
  d.ops_.insert(d.ops_.end(), o.ops_.begin(), o.ops_.end());
  return d;
}

Distribution Distribution::operator-(const Distribution& o) const {
  return *this + o.scaled(-1.0);
}

Distribution Distribution::scaled(double c) const {
  Distribution d = *this;
  if (c == 0.0) {
    d.deltas_.clear();
    d.densities_.clear();
    d.ops_.clear();
    return d;
  }
  for (auto& t : d.deltas_) t.coeff *= c;
  for (auto& t : d.densities_) t.coeff *= c;
  for (auto& t : d.ops_) t.coeff *= c;
  return d;
}

void Distribution::add_delta(double coeff, const Pt& p, const MIdx& gamma) {
  if (coeff == 0.0) return;
  for (auto& t : deltas_) {
    if (t.p == p && t.gamma == gamma) {
      t.coeff += coeff;
      return;
    }
  }
  deltas_.push_back({coeff, p, gamma});
}

double Distribution::pair(const TestFn& psi, double abs_tol) const {
  for (int i = 0; i < n_; ++i) {
    if (psi.support.lo[i] < domain_.lo[i] || psi.support.hi[i] > domain_.hi[i])
      throw EvalError("test function support " + psi.support.str() +
                      " leaves the domain " + domain_.str());
  }
  double sum = 0.0;
  for (const auto& t : deltas_) {
    if (!psi.support.contains(t.p)) continue;
    double sign = gensec::order(t.gamma) % 2 ? -1.0 : 1.0;
    sum += t.coeff * sign * psi.f.d(t.gamma).eval(t.p);
  }
  for (const auto& t : densities_) {
    Box bx = t.region.box.intersect(psi.support);
    if (bx.empty()) continue;
    if (psi.gl_order > 0 && t.region.covers(psi.support)) {
      Field g = Field::product({Field::constant(t.coeff), t.density, psi.f});
      sum += integrate_panels([&](const double* x) { return g.eval(x); }, psi.support,
                              psi.gl_order, psi.gl_panels);
      continue;
    }
    const Field& den = t.density;
    const std::optional<Field>& guard = t.region.guard;
    double c = t.coeff;
    FnN fn = [&](const double* x) {
      if (guard && !(guard->eval(x) > 0.0)) return 0.0;
      return c * den.eval(x) * psi.f.eval(x);
    };
    sum += integrate(fn, bx, abs_tol);
  }
  for (const auto& t : ops_) {
    TestFn inner_psi{Field::product({t.weight, psi.f.d(t.beta)}), psi.support, 0, 0};
    sum += t.coeff * t.inner->pair(inner_psi, abs_tol);
  }
  return sum;
}

std::optional<Field> Distribution::local_density(const Box& b) const {
  for (const auto& t : deltas_)
    if (b.contains(t.p)) return std::nullopt;
  std::vector<Field> parts;
  for (const auto& t : densities_) {
    if (t.region.misses(b)) continue;
    if (!t.region.covers(b)) return std::nullopt;
    parts.push_back(Field::scale(t.coeff, t.density));
  }
  for (const auto& t : ops_) {
    if (t.inner->support().intersect(b).empty()) continue;
    return std::nullopt;
  }
  return Field::sum(std::move(parts));
}

Distribution Distribution::deriv(int axis) const {
  Distribution d = shell();
  for (const auto& t : deltas_) {
    MIdx g = t.gamma;
    g[axis] += 1;
    d.deltas_.push_back({t.coeff, t.p, g});
  }
  for (const auto& t : densities_) {
    bool symbolic;
    if (t.region.guard) {
      symbolic = false;
    } else if (n_ == 1) {
      symbolic = true;
    } else {
      // No cut strictly inside the domain on any axis.
      symbolic = t.region.covers(domain_);
    }
    if (!symbolic) {
      auto inner = std::make_shared<Distribution>(shell());
      inner->densities_.push_back({1.0, t.region, t.density, t.density_expr});
      d.ops_.push_back({-t.coeff, midx1(axis), Field::constant(1.0), inner});
      continue;
    }
    if (Field df = t.density.d(axis); !df.is_zero()) {
      DensityTerm interior{t.coeff, t.region, df, {}};
      if (t.density_expr) interior.density_expr = t.density_expr->diff(axis);
      d.densities_.push_back(std::move(interior));
    }
    if (n_ == 1) {
      double a = t.region.box.lo[0], b = t.region.box.hi[0];
      if (std::isfinite(a) && a > domain_.lo[0]) {
        Pt p = pt0();
        p[0] = a;
        d.add_delta(t.coeff * t.density.eval(p), p, midx0());
      }
      if (std::isfinite(b) && b < domain_.hi[0]) {
        Pt p = pt0();
        p[0] = b;
        d.add_delta(-t.coeff * t.density.eval(p), p, midx0());
      }
    }
  }
  for (const auto& t : ops_) {
    MIdx b = t.beta;
    b[axis] += 1;
    d.ops_.push_back({-t.coeff, b, t.weight, t.inner});
  }
  return d;
}

Distribution Distribution::mul(const Field& g) const {
  Distribution d = shell();
  for (const auto& t : deltas_) {
    // g * d^gamma delta_p expands over derivatives of g at p.
    const MIdx& ga = t.gamma;
    MIdx b;
    for (b[0] = 0; b[0] <= ga[0]; ++b[0])
      for (b[1] = 0; b[1] <= ga[1]; ++b[1])
        for (b[2] = 0; b[2] <= ga[2]; ++b[2]) {
          double sign = gensec::order(b) % 2 ? -1.0 : 1.0;
          double c = t.coeff * sign * midx_binom(ga, b) * g.d(b).eval(t.p);
          d.add_delta(c, t.p, ga - b);
        }
  }
  for (const auto& t : densities_)
    d.densities_.push_back({t.coeff, t.region, Field::product({t.density, g}), {}});
  for (const auto& t : ops_) {
    // <g u, psi> = coeff <inner, w d^beta (g psi)>, Leibniz over beta.
    const MIdx& be = t.beta;
    MIdx b;
    for (b[0] = 0; b[0] <= be[0]; ++b[0])
      for (b[1] = 0; b[1] <= be[1]; ++b[1])
        for (b[2] = 0; b[2] <= be[2]; ++b[2]) {
          double c = t.coeff * midx_binom(be, b);
          Field w = Field::product({t.weight, g.d(b)});
          d.ops_.push_back({c, be - b, std::move(w), t.inner});
        }
  }
  return d;
}

Distribution Distribution::mul(const Expr& g) const {
  Distribution d = mul(Field::from_expr(g));
  // Restore expression provenance on plain density products.
  for (size_t i = 0; i < d.densities_.size() && i < densities_.size(); ++i)
    if (densities_[i].density_expr)
      d.densities_[i].density_expr = *densities_[i].density_expr * g;
  return d;
}

Distribution Distribution::lie(const std::vector<Field>& X) const {
  if (int(X.size()) != n_) throw ConstructionError("vector field arity mismatch");
  std::vector<Field> div_terms;
  for (int i = 0; i < n_; ++i) div_terms.push_back(X[i].d(i));
  Field div = Field::sum(std::move(div_terms));
  Distribution acc = mul(div).scaled(-1.0);
  for (int i = 0; i < n_; ++i) acc = acc + mul(X[i]).deriv(i);
  return acc;
}

Distribution Distribution::restricted(const Box& V) const {
  Distribution d = shell();
  d.domain_ = domain_.intersect(V);
  for (const auto& t : deltas_) {
    bool inside = true;
    for (int i = 0; i < n_; ++i)
      if (!(t.p[i] > d.domain_.lo[i] && t.p[i] < d.domain_.hi[i])) inside = false;
    if (inside) d.deltas_.push_back(t);
  }
  for (const auto& t : densities_) {
    Region r = t.region;
    r.box = r.box.intersect(d.domain_);
    if (r.box.empty()) continue;
    d.densities_.push_back({t.coeff, r, t.density, t.density_expr});
  }
  d.ops_ = ops_;
  return d;
}

Distribution Distribution::with_domain(const Box& d) const {
  for (int i = 0; i < n_; ++i)
    if (d.lo[i] > domain_.lo[i] || d.hi[i] < domain_.hi[i])
      throw ConstructionError("with_domain only extends the ambient box (" +
                              domain_.str() + " vs " + d.str() + ")");
  Distribution out = *this;
  out.domain_ = d;
  for (auto& t : out.ops_)
    t.inner = std::make_shared<Distribution>(t.inner->with_domain(d));
  return out;
}

static std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

static std::string fmt_box(const Box& b) {
  std::string s;
  for (int i = 0; i < b.n; ++i) {
    if (i) s += " ";
    s += fmt_g(b.lo[i]) + " " + fmt_g(b.hi[i]);
  }
  return s;
}

static Box parse_box(const std::string& s, int n, int line) {
  std::istringstream is(s);
  Box b;
  b.n = n;
  for (int i = 0; i < n; ++i) {
    std::string lo, hi;
    if (!(is >> lo >> hi)) throw ConfigError("box needs 2 numbers per axis", line, 1);
    b.lo[i] = parse_double(lo, line);
    b.hi[i] = parse_double(hi, line);
  }
  std::string extra;
  if (is >> extra) throw ConfigError("trailing box data '" + extra + "'", line, 1);
  return b;
}

std::string Distribution::serialize() const {
  std::string out = "[distribution]\nn = " + std::to_string(n_) + "\ndomain = " +
                    fmt_box(domain_) + "\n";
  for (const auto& t : deltas_) {
    out += "delta = " + fmt_g(t.coeff) + " ;";
    for (int i = 0; i < n_; ++i) out += " " + fmt_g(t.p[i]);
    out += " ;";
    for (int i = 0; i < n_; ++i) out += " " + std::to_string(t.gamma[i]);
    out += "\n";
  }
  for (const auto& t : densities_) {
    if (!t.density_expr)
      throw ConstructionError(
          "density lacks a closed-form expression; derived distributions are "
          "runtime-only");
    out += "density = " + fmt_g(t.coeff) + " ; " + fmt_box(t.region.box) + " ; " +
           t.density_expr->str();
    if (t.region.guard) {
      if (!t.region.guard_expr)
        throw ConstructionError("guard lacks a closed-form expression");
      out += " ; " + t.region.guard_expr->str();
    }
    out += "\n";
  }
  if (!ops_.empty())
    throw ConstructionError("wrapper distributions are runtime-only, not serializable");
  return out;
}

Distribution Distribution::deserialize(const std::string& text) {
  auto sections = parse_sections(text);
  const TextSection* sec = nullptr;
  for (const auto& s : sections)
    if (s.name == "distribution") sec = &s;
  if (!sec) throw ConfigError("no [distribution] section");
  int n = parse_int(sec->get("n"), sec->line);
  if (n < 1 || n > kMaxDim) throw ConfigError("dimension out of range", sec->line, 1);
  const KVLine* dom = sec->find("domain");
  if (!dom) throw ConfigError("missing key 'domain'", sec->line, 1);
  Distribution d = zero(n, parse_box(dom->value, n, dom->line));
  for (const auto& e : sec->kv) {
    if (e.key == "delta") {
      auto parts = split_list(e.value, ';');
      if (parts.size() != 3) throw ConfigError("delta needs 'coeff ; point ; gamma'", e.line, 1);
      DeltaTerm t{parse_double(parts[0], e.line), pt0(), midx0()};
      std::istringstream ip(parts[1]), ig(parts[2]);
      for (int i = 0; i < n; ++i) {
        std::string v;
        if (!(ip >> v)) throw ConfigError("delta point needs " + std::to_string(n) + " coords", e.line, 1);
        t.p[i] = parse_double(v, e.line);
        if (!(ig >> v)) throw ConfigError("delta gamma needs " + std::to_string(n) + " entries", e.line, 1);
        t.gamma[i] = parse_int(v, e.line);
        if (t.gamma[i] < 0) throw ConfigError("negative derivative order", e.line, 1);
      }
      d.deltas_.push_back(t);
    } else if (e.key == "density") {
      auto parts = split_list(e.value, ';');
      if (parts.size() != 3 && parts.size() != 4)
        throw ConfigError("density needs 'coeff ; box ; expr [; guard]'", e.line, 1);
      Region r{parse_box(parts[1], n, e.line), {}, {}};
      Expr de = parse_expr(parts[2]);
      if (parts.size() == 4) r = Region::guarded(r.box, parse_expr(parts[3]));
      d.densities_.push_back({parse_double(parts[0], e.line), r, Field::from_expr(de), de});
    } else if (e.key != "n" && e.key != "domain") {
      throw ConfigError("unknown key '" + e.key + "'", e.line, 1);
    }
  }
  return d;
}

Field bump_window(const Box& plateau, const Box& support) {
  std::vector<std::pair<int, Cutoff1D>> axes;
  int n = std::max(plateau.n, support.n);
  for (int i = 0; i < n; ++i) {
    Cutoff1D c;
    c.a0 = support.lo[i];
    c.a1 = plateau.lo[i];
    c.b1 = plateau.hi[i];
    c.b0 = support.hi[i];
    if (std::isinf(c.a0) && std::isinf(c.b0)) continue;
    if ((std::isfinite(c.a0) && !(c.a1 > c.a0)) || (std::isfinite(c.b0) && !(c.b1 < c.b0)))
      throw ConstructionError("window plateau must sit strictly inside the support");
    axes.push_back({i, c});
  }
  return Field::cutoff(std::move(axes));
}

TestFn window_test_fn(const Expr& e, const Box& plateau, const Box& support) {
  return TestFn{Field::product({Field::from_expr(e), bump_window(plateau, support)}),
                support, 0, 0};
}

}  // namespace gensec
