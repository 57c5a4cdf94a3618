#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gensec/bump.hpp"
#include "gensec/field.hpp"
#include "oracles.hpp"

using namespace gensec;

TEST_CASE("expression-backed fields differentiate exactly") {
  Field f = Field::from_expr(parse_expr("sin(x)*exp(y)"));
  Pt p = {0.4, -0.2, 0};
  CHECK(f.eval(p) == doctest::Approx(std::sin(0.4) * std::exp(-0.2)));
  Field fx = f.d(0);
  CHECK(fx.eval(p) == doctest::Approx(std::cos(0.4) * std::exp(-0.2)));
  Field fxy = f.d(0).d(1);
  CHECK(fxy.eval(p) == doctest::Approx(std::cos(0.4) * std::exp(-0.2)));
}

TEST_CASE("bump derivative recurrence matches finite differences") {
  for (int m : {1, 2, 3, 5}) {
    for (double t : {-0.7, -0.2, 0.0, 0.5, 0.9}) {
      double fd = oracle::fd_deriv([m](double s) { return bump_deriv(m - 1, s); }, t, 1e-5);
      CHECK(bump_deriv(m, t) == doctest::Approx(fd).epsilon(5e-6));
    }
  }
  CHECK(bump_deriv(0, 1.0) == 0.0);
  CHECK(bump_deriv(3, -1.2) == 0.0);
}

TEST_CASE("smooth step") {
  CHECK(smooth_step_deriv(0, -0.1) == 0.0);
  CHECK(smooth_step_deriv(0, 1.1) == 1.0);
  CHECK(smooth_step_deriv(0, 0.5) == doctest::Approx(0.5));
  CHECK(smooth_step_deriv(2, 1.7) == 0.0);
  for (double t : {0.2, 0.5, 0.8}) {
    double fd = oracle::fd_deriv([](double s) { return smooth_step_deriv(0, s); }, t, 1e-5);
    CHECK(smooth_step_deriv(1, t) == doctest::Approx(fd).epsilon(1e-6));
    double fd2 = oracle::fd_deriv([](double s) { return smooth_step_deriv(1, s); }, t, 1e-5);
    CHECK(smooth_step_deriv(2, t) == doctest::Approx(fd2).epsilon(1e-5));
  }
}

TEST_CASE("cutoff plateau is exactly one") {
  Cutoff1D c{-1.0, -0.5, 0.5, 1.0};
  CHECK(c.eval_deriv(0, 0.0) == 1.0);
  CHECK(c.eval_deriv(0, 0.49999) == 1.0);
  CHECK(c.eval_deriv(1, 0.2) == 0.0);
  CHECK(c.eval_deriv(0, -1.2) == 0.0);
  CHECK(c.eval_deriv(0, 0.75) > 0.0);
  CHECK(c.eval_deriv(0, 0.75) < 1.0);
  // one-sided cutoffs
  Cutoff1D left{-kInf, -kInf, 0.0, 1.0};
  CHECK(left.eval_deriv(0, -100.0) == 1.0);
  CHECK(left.eval_deriv(0, 2.0) == 0.0);
}

TEST_CASE("cutoff fields differentiate correctly") {
  Cutoff1D c{-1.0, -0.5, 0.5, 1.0};
  Field chi = Field::cutoff({{0, c}});
  for (double t : {-0.8, 0.7, 0.9}) {
    Pt p = {t, 0, 0};
    double fd = oracle::fd_deriv([&](double s) { return c.eval_deriv(0, s); }, t, 1e-5);
    CHECK(chi.d(0).eval(p) == doctest::Approx(fd).epsilon(1e-5));
  }
  // 2-D product cutoff
  Field chi2 = Field::cutoff({{0, c}, {1, c}});
  Pt q = {0.7, 0.8, 0};
  CHECK(chi2.eval(q) == doctest::Approx(c.eval_deriv(0, 0.7) * c.eval_deriv(0, 0.8)));
  Pt in = {0.0, 0.3, 0};
  CHECK(chi2.eval(in) == 1.0);
}

TEST_CASE("product flattening makes commuted prefixes bit-identical") {
  Field chi = Field::cutoff({{0, Cutoff1D{-1, -0.5, 0.5, 1}}});
  Field f = Field::from_expr(parse_expr("exp(sin(x))"));
  Field p = Field::from_expr(parse_expr("x^2 + 1"));
  Field a = Field::product({chi, Field::product({f, p})});
  Field b = Field::product({f, Field::product({chi, p})});
  for (double t : {-0.8, -0.3, 0.1, 0.66, 0.93}) {
    Pt x = {t, 0, 0};
    CHECK(a.eval(x) == b.eval(x));  // exact, not approximate
  }
}

TEST_CASE("reciprocal fields") {
  Field f = Field::from_expr(parse_expr("2 + sin(x)"));
  Field r = Field::recip(f);
  Pt p = {0.9, 0, 0};
  CHECK(r.eval(p) == doctest::Approx(1.0 / (2 + std::sin(0.9))));
  double fd = oracle::fd_deriv([&](double s) { return 1.0 / (2 + std::sin(s)); }, 0.9);
  CHECK(r.d(0).eval(p) == doctest::Approx(fd).epsilon(1e-9));
}

TEST_CASE("composition with closed-form maps") {
  // f(y) = bump-like cutoff of y0, composed with y = (2x0 + 1, x1 - x0)
  Field inner = Field::from_expr(parse_expr("sin(x0)*x1"));
  std::vector<Expr> map = {parse_expr("2*x0 + 1"), parse_expr("x1 - x0")};
  Field g = Field::compose(inner, map);
  Pt p = {0.3, 0.8, 0};
  CHECK(g.eval(p) == doctest::Approx(std::sin(1.6) * 0.5));
  double fd = oracle::fd_deriv(
      [&](double s) {
        Pt q = {s, 0.8, 0};
        return g.eval(q);
      },
      0.3);
  CHECK(g.d(0).eval(p) == doctest::Approx(fd).epsilon(1e-8));
  // second derivative through the chain rule
  double fd2 = oracle::fd_deriv2(
      [&](double s) {
        Pt q = {s, 0.8, 0};
        return g.eval(q);
      },
      0.3, 1e-4);
  CHECK(g.d(0).d(0).eval(p) == doctest::Approx(fd2).epsilon(1e-5));
}

TEST_CASE("structural zeros short-circuit") {
  Field z;
  CHECK(z.is_zero());
  Field f = Field::from_expr(parse_expr("x^2"));
  CHECK(Field::product({f, z}).is_zero());
  CHECK(Field::sum({z, z}).is_zero());
  CHECK(Field::scale(0.0, f).is_zero());
  CHECK(!Field::sum({f, z}).is_zero());
  // constant folding through scale
  Field c = Field::scale(3.0, Field::constant(2.0));
  Pt p = {0, 0, 0};
  CHECK(c.eval(p) == 6.0);
}
