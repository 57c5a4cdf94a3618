#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gensec/errors.hpp"
#include "gensec/expr.hpp"
#include "oracles.hpp"

using namespace gensec;

TEST_CASE("parse and evaluate") {
  Expr e = parse_expr("sin(x)*exp(y) + x^2/2 - 3");
  double x[2] = {0.7, -0.3};
  double want = std::sin(0.7) * std::exp(-0.3) + 0.49 / 2 - 3;
  CHECK(e.eval(x) == doctest::Approx(want).epsilon(1e-15));

  Expr c = parse_expr("cos(pi)");
  double z[1] = {0.0};
  CHECK(c.eval(z) == doctest::Approx(-1.0).epsilon(1e-15));

  Expr alias = parse_expr("x0 + 2*x1");
  CHECK(alias.eval(x) == doctest::Approx(0.7 - 0.6));
}

TEST_CASE("differentiation matches finite differences") {
  Expr e = parse_expr("exp(sin(2*x)) * cos(x) + x^3");
  Expr de = e.diff(0);
  for (double t : {-1.1, -0.2, 0.4, 1.7}) {
    double fd = oracle::fd_deriv([&](double s) { return e.eval(&s); }, t);
    CHECK(de.eval(&t) == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("second derivatives and mixed partials") {
  Expr e = parse_expr("sin(x*y) + x^2*y");
  Expr dxy = e.diff(0).diff(1);
  Expr dyx = e.diff(1).diff(0);
  double p[2] = {0.3, 1.2};
  CHECK(dxy.eval(p) == doctest::Approx(dyx.eval(p)).epsilon(1e-14));
  double want = std::cos(0.36) - 0.3 * 1.2 * std::sin(0.36) * 1.2 * 0.3 / (1.2 * 0.3);
  (void)want;  // sanity against FD instead of hand algebra
  double fd = oracle::fd_deriv(
      [&](double yy) {
        Expr dx = e.diff(0);
        double q[2] = {0.3, yy};
        return dx.eval(q);
      },
      1.2);
  CHECK(dxy.eval(p) == doctest::Approx(fd).epsilon(1e-7));
}

TEST_CASE("string round trip") {
  for (const char* s :
       {"sin(x)*exp(y) + x^2/2 - 3", "x/(1 + y^2)", "-x + 4*cos(2*y)",
        "exp(-(x^2))"}) {
    Expr e = parse_expr(s);
    Expr e2 = parse_expr(e.str());
    for (double a : {-0.9, 0.1, 0.8}) {
      double p[2] = {a, 0.5 - a};
      CHECK(e.eval(p) == doctest::Approx(e2.eval(p)).epsilon(1e-15));
    }
  }
}

TEST_CASE("parse errors carry position") {
  CHECK_THROWS_AS(parse_expr("sin(x"), ConfigError);
  CHECK_THROWS_AS(parse_expr("x +* y"), ConfigError);
  CHECK_THROWS_AS(parse_expr("foo(x)"), ConfigError);
  CHECK_THROWS_AS(parse_expr("x^y"), ConfigError);  // exponent must be constant
  try {
    parse_expr("1 +\n  bad");
  } catch (const ConfigError& e) {
    CHECK(e.line == 2);
    CHECK(e.col >= 3);
  }
}

TEST_CASE("affine substitution") {
  Expr e = parse_expr("sin(x) + y");
  // x -> 2*u + 1, y -> -v
  Expr s = substitute_affine(e, {{2.0, 0.0}, {0.0, -1.0}}, {1.0, 0.0});
  double uv[2] = {0.4, 0.7};
  CHECK(s.eval(uv) == doctest::Approx(std::sin(1.8) - 0.7).epsilon(1e-15));
  // derivative commutes with substitution up to chain factor
  Expr ds = s.diff(0);
  Expr de = e.diff(0);
  Expr de_sub = substitute_affine(de, {{2.0, 0.0}, {0.0, -1.0}}, {1.0, 0.0});
  CHECK(ds.eval(uv) == doctest::Approx(2.0 * de_sub.eval(uv)).epsilon(1e-14));
}

TEST_CASE("constant folding keeps zero detection structural") {
  Expr z = parse_expr("0*sin(x)");
  CHECK(z.is_zero());
  Expr one = parse_expr("2^0");
  double c = 0;
  CHECK(one.is_const(&c));
  CHECK(c == 1.0);
  CHECK(parse_expr("x - x").max_var() == 0);  // not simplified, but evaluates to 0
}
