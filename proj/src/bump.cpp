#include "gensec/bump.hpp"

#include <cmath>
#include <stdexcept>

namespace gensec {

Poly Poly::monomial(int k, double a) {
  Poly p;
  p.c.assign(k + 1, 0.0);
  p.c[k] = a;
  return p;
}

double Poly::eval(double t) const {
  double r = 0.0;
  for (size_t i = c.size(); i-- > 0;) r = r * t + c[i];
  return r;
}

Poly Poly::deriv() const {
  Poly p;
  if (c.size() <= 1) return p;
  p.c.resize(c.size() - 1);
  for (size_t k = 1; k < c.size(); ++k) p.c[k - 1] = c[k] * double(k);
  return p;
}

Poly Poly::operator+(const Poly& o) const {
  Poly p;
  p.c.resize(std::max(c.size(), o.c.size()), 0.0);
  for (size_t i = 0; i < c.size(); ++i) p.c[i] += c[i];
  for (size_t i = 0; i < o.c.size(); ++i) p.c[i] += o.c[i];
  return p;
}

Poly Poly::operator*(const Poly& o) const {
  Poly p;
  if (c.empty() || o.c.empty()) return p;
  p.c.assign(c.size() + o.c.size() - 1, 0.0);
  for (size_t i = 0; i < c.size(); ++i)
    for (size_t j = 0; j < o.c.size(); ++j) p.c[i + j] += c[i] * o.c[j];
  return p;
}

Poly Poly::operator*(double s) const {
  Poly p = *this;
  for (double& v : p.c) v *= s;
  return p;
}

namespace {

constexpr int kMaxBumpDeriv = 24;

// R_{m+1} = (1-t^2)^2 R_m' + (4 m t (1-t^2) - 2 t) R_m
const std::vector<Poly>& bump_tables() {
  static const std::vector<Poly> tables = [] {
    std::vector<Poly> r;
    r.push_back(Poly({1.0}));
    Poly one_minus_t2({1.0, 0.0, -1.0});
    Poly sq = one_minus_t2 * one_minus_t2;
    for (int m = 0; m < kMaxBumpDeriv; ++m) {
      Poly t = Poly::monomial(1);
      Poly lin = t * one_minus_t2 * (4.0 * m) + t * (-2.0);
      r.push_back(sq * r[m].deriv() + lin * r[m]);
    }
    return r;
  }();
  return tables;
}

// P_{m+1} = t^2 P_m' + (1 - 2 m t) P_m   for exp(-1/t)
const std::vector<Poly>& exp_recip_tables() {
  static const std::vector<Poly> tables = [] {
    std::vector<Poly> r;
    r.push_back(Poly({1.0}));
    Poly t2 = Poly::monomial(2);
    for (int m = 0; m < kMaxBumpDeriv; ++m) {
      Poly lin({1.0, -2.0 * m});
      r.push_back(t2 * r[m].deriv() + lin * r[m]);
    }
    return r;
  }();
  return tables;
}

}  // namespace

double bump_deriv(int m, double t) {
  if (m > kMaxBumpDeriv) throw std::out_of_range("bump_deriv order too large");
  if (std::abs(t) >= 1.0) return 0.0;
  double u = 1.0 - t * t;
  double inv = 1.0 / u;
  if (inv > 700.0) return 0.0;  // exp underflows before the prefactor can blow up
  double b = std::exp(-inv);
  if (m == 0) return b;
  double pref = bump_tables()[m].eval(t) * std::pow(inv, 2 * m);
  return pref * b;
}

double exp_recip_deriv(int m, double t) {
  if (m > kMaxBumpDeriv) throw std::out_of_range("exp_recip_deriv order too large");
  if (t <= 0.0) return 0.0;
  double inv = 1.0 / t;
  if (inv > 700.0) return 0.0;
  double f = std::exp(-inv);
  if (m == 0) return f;
  return exp_recip_tables()[m].eval(t) * std::pow(inv, 2 * m) * f;
}

double smooth_step_deriv(int m, double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return m == 0 ? 1.0 : 0.0;
  // s g = f(t), g = f(t) + f(1-t):
  //   s^(k) = [f^(k)(t) - sum_{j<k} C(k,j) s^(j) g^(k-j)] / g
  std::vector<double> fd(m + 1), gd(m + 1), sd(m + 1);
  for (int k = 0; k <= m; ++k) {
    fd[k] = exp_recip_deriv(k, t);
    double sign = (k % 2 == 0) ? 1.0 : -1.0;
    gd[k] = fd[k] + sign * exp_recip_deriv(k, 1.0 - t);
  }
  for (int k = 0; k <= m; ++k) {
    double acc = fd[k];
    for (int j = 0; j < k; ++j) acc -= binom(k, j) * sd[j] * gd[k - j];
    sd[k] = acc / gd[0];
  }
  return sd[m];
}

double Cutoff1D::eval_deriv(int m, double t) const {
  if (t <= a0 || t >= b0) return 0.0;
  if (t >= a1 && t <= b1) return m == 0 ? 1.0 : 0.0;
  if (t < a1) {
    double w = a1 - a0;
    return smooth_step_deriv(m, (t - a0) / w) / std::pow(w, m);
  }
  double w = b0 - b1;
  double sign = (m % 2 == 0) ? 1.0 : -1.0;
  return sign * smooth_step_deriv(m, (b0 - t) / w) / std::pow(w, m);
}

}  // namespace gensec
