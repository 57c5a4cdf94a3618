#include "gensec/mollifier.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "gensec/errors.hpp"
#include "gensec/quadrature.hpp"
#include "gensec/text.hpp"

namespace gensec {

double Mollifier::profile1_deriv(int m, double t) const {
  // profile1 = P(t) * B(t) / base_mass on [-1,1]; Leibniz over the product.
  if (std::abs(t) >= 1.0) return 0.0;
  double acc = 0.0;
  Poly pd = poly;
  for (int j = 0; j <= m; ++j) {
    if (!pd.c.empty()) acc += binom(m, j) * pd.eval(t) * bump_deriv(m - j, t);
    pd = pd.deriv();
  }
  return acc / base_mass;
}

double Mollifier::profile_deriv(const MIdx& beta, const Pt& y) const {
  double h = half_width();
  double p = 1.0;
  for (int ax = 0; ax < n; ++ax) {
    double v = profile1_deriv(beta[ax], y[ax] / h) / std::pow(h, beta[ax] + 1);
    if (v == 0.0) return 0.0;
    p *= v;
  }
  return p;
}

double Mollifier::mass_error() const {
  double h = half_width();
  double m1 = integrate_1d([&](double t) { return profile1_deriv(0, t / h) / h; },
                           -h, h, 1e-12);
  // Tensor structure: total mass is the 1-D mass to the n-th power.
  return std::abs(std::pow(m1, n) - 1.0);
}

double Mollifier::moment(const MIdx& alpha) const {
  double h = half_width();
  double m = 1.0;
  for (int ax = 0; ax < n; ++ax) {
    int j = alpha[ax];
    m *= integrate_1d(
        [&](double t) { return std::pow(t, j) * profile1_deriv(0, t / h) / h; },
        -h, h, 1e-12);
  }
  return m;
}

int Mollifier::effective_moment_order(int max_check) const {
  for (int j = 1; j <= max_check; ++j) {
    for (const MIdx& a : midx_upto(n, j)) {
      if (order(a) != j) continue;
      if (std::abs(moment(a)) > 1e-8) return j - 1;
    }
  }
  return max_check;
}

std::string Mollifier::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "[mollifier]\n";
  os << "n = " << n << "\n";
  os << "q = " << q << "\n";
  os << "base = " << base << "\n";
  os << "r0 = " << r0 << "\n";
  os << "coeff = ";
  for (size_t i = 0; i < poly.c.size(); ++i) {
    if (i) os << ", ";
    os << poly.c[i];
  }
  os << "\n";
  return os.str();
}

Mollifier Mollifier::deserialize(const std::string& text) {
  auto secs = parse_sections(text);
  const TextSection* s = nullptr;
  for (const auto& sec : secs)
    if (sec.name == "mollifier") s = &sec;
  if (!s) throw ConfigError("no [mollifier] section");
  Mollifier m;
  m.n = parse_int(s->get("n"), s->line);
  m.q = parse_int(s->get("q"), s->line);
  m.base = s->get_or("base", "bump");
  m.r0 = parse_double(s->get_or("r0", "1"), s->line);
  if (m.base != "bump")
    throw ConfigError("unknown base profile '" + m.base + "'", s->line, 1);
  std::vector<double> c;
  for (const auto& tok : split_list(s->get("coeff")))
    c.push_back(parse_double(tok, s->line));
  m.poly = Poly(c);
  m.base_mass = integrate_1d([](double t) { return bump(t); }, -1.0, 1.0, 1e-13);
  return m;
}

std::vector<double> solve_moment_coeffs(const std::vector<double>& mu, int q) {
  if (int(mu.size()) < 2 * q + 1)
    throw ConstructionError("need moments through order " + std::to_string(2 * q));
  Eigen::MatrixXd M(q + 1, q + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(q + 1);
  rhs(0) = 1.0;
  for (int j = 0; j <= q; ++j)
    for (int k = 0; k <= q; ++k) M(j, k) = mu[j + k];
  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  lu.setThreshold(1e-12);
  if (lu.rank() < q + 1) {
    int offending = lu.rank();  // first moment row not independent
    throw ConstructionError("moment system singular: moment order " +
                            std::to_string(offending) +
                            " not attainable from the base profile");
  }
  Eigen::VectorXd c = lu.solve(rhs);
  return std::vector<double>(c.data(), c.data() + q + 1);
}

Mollifier make_mollifier(int n, int q, const std::string& base, double r0) {
  if (n < 1 || n > kMaxDim) throw ConstructionError("mollifier dimension out of range");
  if (q < 0) throw ConstructionError("moment order must be >= 0");
  if (!(r0 > 0.0) || r0 > 1.0)
    throw ConstructionError("support radius must lie in (0, 1]");
  if (base != "bump") throw ConstructionError("unknown base profile '" + base + "'");

  Mollifier m;
  m.n = n;
  m.q = q;
  m.r0 = r0;
  m.base = base;
  m.base_mass = integrate_1d([](double t) { return bump(t); }, -1.0, 1.0, 1e-13);

  // Moments of the normalized base on [-1,1].
  std::vector<double> mu(2 * q + 1);
  for (int j = 0; j <= 2 * q; ++j)
    mu[j] = integrate_1d(
                [&](double t) { return std::pow(t, j) * bump(t); }, -1.0, 1.0,
                1e-13) /
            m.base_mass;
  m.poly = Poly(solve_moment_coeffs(mu, q));

  double mass_err = m.mass_error();
  if (mass_err > 1e-10)
    throw ConstructionError("profile mass off by " + std::to_string(mass_err));
  for (int j = 1; j <= q; ++j) {
    double h = m.half_width();
    double mom = integrate_1d(
        [&](double t) { return std::pow(t, j) * m.profile1_deriv(0, t / h) / h; },
        -h, h, 1e-12);
    if (std::abs(mom) > 1e-8)
      throw ConstructionError("moment " + std::to_string(j) + " is " +
                              std::to_string(mom) + ", should vanish");
  }
  return m;
}

// ---------------------------------------------------------------------------
// kernel net

namespace {

// y -> d^alpha_x d^beta_y kernel_eps(x, y), closed form via profile recurrence.
class KernelFieldNode : public FieldNode {
 public:
  Mollifier rho;
  double eps;
  Pt x;
  MIdx alpha, beta;

  KernelFieldNode(Mollifier m, double e, Pt x_, MIdx a, MIdx b)
      : rho(std::move(m)), eps(e), x(x_), alpha(a), beta(b) {}

  double eval(const double* y) const override {
    double eh = eps * rho.half_width();
    double p = 1.0;
    for (int ax = 0; ax < rho.n; ++ax) {
      int mord = alpha[ax] + beta[ax];
      double t = (y[ax] - x[ax]) / eh;
      double v = rho.profile1_deriv(mord, t) / std::pow(eh, mord + 1);
      if (alpha[ax] % 2 == 1) v = -v;
      if (v == 0.0) return 0.0;
      p *= v;
    }
    return p;
  }

  Field deriv(int axis) const override {
    MIdx b2 = beta;
    b2[axis] += 1;
    return Field(std::make_shared<KernelFieldNode>(rho, eps, x, alpha, b2));
  }
};

}  // namespace

double KernelNet::value(double eps, const Pt& x, const MIdx& alpha, const Pt& y,
                        const MIdx& beta) const {
  KernelFieldNode node(rho, eps, x, alpha, beta);
  return node.eval(y.data());
}

Box KernelNet::support_box(double eps, const Pt& x) const {
  double eh = eps * rho.half_width();
  Box b;
  b.n = rho.n;
  for (int ax = 0; ax < rho.n; ++ax) {
    b.lo[ax] = x[ax] - eh;
    b.hi[ax] = x[ax] + eh;
  }
  return b;
}

TestFn KernelNet::kernel(double eps, const Pt& x, const MIdx& alpha) const {
  TestFn tf;
  tf.f = Field(std::make_shared<KernelFieldNode>(rho, eps, x, alpha, midx0()));
  tf.support = support_box(eps, x);
  // The profile is flat to all orders at the support edge but not analytic,
  // so Gauss panels converge root-exponentially; this setting reaches the
  // machine floor for smooth integrands (order 32 with 2 panels stalls near
  // 2e-10, which pollutes decay-rate fits).
  tf.gl_order = 48;
  tf.gl_panels = 4;
  return tf;
}

}  // namespace gensec
