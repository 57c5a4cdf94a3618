#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "gen_trees.hpp"
#include "gensec/errors.hpp"
#include "gensec/gen_section.hpp"
#include "oracles.hpp"

using namespace gensec;

namespace {

const Box kU = Box::interval(-2.0, 2.0);
const Box kK = Box::interval(-1.0, 1.0);

const Mollifier& rho4() {
  static Mollifier m = make_mollifier(1, 4);
  return m;
}
const Mollifier& rho2() {
  static Mollifier m = make_mollifier(1, 2);
  return m;
}
const Mollifier& rho24() {
  static Mollifier m = make_mollifier(2, 4);
  return m;
}

std::shared_ptr<const ChartedManifold> M1() {
  static auto m = ChartedManifold::box(kU);
  return m;
}

PhiFamily family_for(const std::vector<std::shared_ptr<const Bundle>>& Es,
                     const Mollifier& rho) {
  PhiFamily f;
  for (const auto& E : Es) {
    PhiFamily g = mollifier_family(E, rho);
    for (const TestObjectAssignment& it : g.items()) f.assign(it.E, it.nets);
  }
  return f;
}

// One perturbation direction per bundle: difference of two kernel nets.
PhiFamily dir_family(const std::vector<std::shared_ptr<const Bundle>>& Es,
                     const Mollifier& hi_m, const Mollifier& lo_m) {
  PhiFamily f;
  for (const auto& E : Es) {
    const Box& U = E->base().chart_box(0);
    VectorOpNet hi = VectorOpNet::mollifier_net(hi_m, U, E->fiber_dim());
    VectorOpNet lo = VectorOpNet::mollifier_net(lo_m, U, E->fiber_dim());
    f.assign(E, {net_lin_comb(1.0, hi, -1.0, lo)});
  }
  return f;
}

double sup_val(const EvalSection& a, const Box& K, int pts) {
  double m = 0;
  for (int k = 0; k < a.E->fiber_dim(); ++k)
    for (double v : a.values(0, K, pts, k)) m = std::max(m, std::abs(v));
  return m;
}

double sup_diff(const EvalSection& a, const EvalSection& b, const Box& K, int pts) {
  REQUIRE(a.E->fiber_dim() == b.E->fiber_dim());
  double m = 0;
  for (int k = 0; k < a.E->fiber_dim(); ++k) {
    std::vector<double> va = a.values(0, K, pts, k), vb = b.values(0, K, pts, k);
    for (size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  }
  return m;
}

bool thrown_with(const std::function<void()>& f, const char* sub) {
  try {
    f();
  } catch (const std::exception& e) {
    return std::string(e.what()).find(sub) != std::string::npos;
  }
  return false;
}

GenSection embed1(const std::shared_ptr<const Bundle>& E, Distribution u) {
  return GenSection::embed(DistributionalSection(E, {{std::move(u)}}));
}

}  // namespace

TEST_CASE("smooth sections embed multiplicatively and ignore the family") {
  auto M = M1();
  GenSection Rf = GenSection::smooth(SmoothSection::scalar(M, parse_expr("sin(x) + 2")));
  GenSection Rg = GenSection::smooth(SmoothSection::scalar(M, parse_expr("exp(0.3*x)")));
  GenSection prod = GenSection::scalar_mul(Rf, Rg);
  GenSection Rfg = GenSection::smooth(
      SmoothSection::scalar(M, parse_expr("(sin(x) + 2)*exp(0.3*x)")));

  CHECK(prod.total_degree() == 0);
  CHECK(prod.polynomial());
  CHECK(prod.index_set().empty());

  PhiFamily none;
  Box K = Box::interval(-1.5, 1.5);
  CHECK(sup_diff(prod.evaluate(none, 0.25), Rfg.evaluate(none, 0.25), K, 33) < 1e-13);

  // The evaluation does not depend on the family or on eps at all.
  auto line = Bundle::trivial(M, 1);
  std::vector<double> va = Rf.evaluate(mollifier_family(line, rho4()), 0.5).values(0, K, 17, 0);
  std::vector<double> vb = Rf.evaluate(mollifier_family(line, rho2()), 0.125).values(0, K, 17, 0);
  for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
}

TEST_CASE("an embedded delta evaluates to the kernel action and differentiates linearly") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  Distribution del = Distribution::delta(kU, pt0());
  GenSection R = embed1(line, del);
  CHECK(R.degree(*line) == 1);
  CHECK(R.total_degree() == 1);

  PhiFamily phi = mollifier_family(line, rho4());
  PhiFamily psi = dir_family({line}, rho4(), rho2());
  double eps = 0.25;

  Field direct = VectorOpNet::mollifier_net(rho4(), kU, 1).act1(eps, del);
  EvalSection ev = R.evaluate(phi, eps);
  for (const Pt& x : grid_points(kK, 33))
    CHECK(ev.comp[0][0].eval(x) == doctest::Approx(direct.eval(x)).epsilon(1e-14));

  VectorOpNet hi = VectorOpNet::mollifier_net(rho4(), kU, 1);
  VectorOpNet lo = VectorOpNet::mollifier_net(rho2(), kU, 1);
  Field ddir = net_lin_comb(1.0, hi, -1.0, lo).act1(eps, del);
  EvalSection d1 = R.differential(phi, {psi}, eps);
  for (const Pt& x : grid_points(kK, 33))
    CHECK(d1.comp[0][0].eval(x) == doctest::Approx(ddir.eval(x)).epsilon(1e-14));

  // Degree one: everything past the first differential is structurally zero.
  EvalSection d2 = R.differential(phi, {psi, psi}, eps);
  for (const Pt& x : grid_points(kK, 9)) CHECK(d2.comp[0][0].eval(x) == 0.0);
}

TEST_CASE("an embedded density converges to its smooth representative at the moment order") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  Expr w = parse_expr("sin(x) + 2");
  GenSection R = embed1(line, Distribution::density(kU, w));
  GenSection S = GenSection::smooth(SmoothSection::scalar(M, w));

  for (int q : {2, 4}) {
    PhiFamily phi = mollifier_family(line, q == 2 ? rho2() : rho4());
    std::vector<double> es, vs;
    for (int k = 2; k <= 6; ++k) {
      double eps = std::pow(2.0, -k);
      es.push_back(eps);
      vs.push_back(sup_diff(R.evaluate(phi, eps), S.evaluate(phi, eps), kK, 17));
    }
    double slope = oracle::loglog_fit(es, vs).first;
    CHECK(slope > q - 0.3);
  }
}

TEST_CASE("tensor products differentiate by the product rule") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  GenSection A = embed1(line, Distribution::delta(kU, pt0()));
  GenSection B = embed1(line, Distribution::density(kU, parse_expr("sin(x) + 2")));
  GenSection T = GenSection::tensor(A, B);
  CHECK(T.degree(*line) == 2);
  CHECK(T.total_degree() == 2);

  PhiFamily phi = mollifier_family(line, rho4());
  PhiFamily psi = dir_family({line}, rho4(), rho2());
  double eps = 0.25;

  for (int j : {1, 2}) {
    EvalSection sym = T.differential(phi, std::vector<PhiFamily>(size_t(j), psi), eps);
    EvalSection itp = differential_interp(T, j, phi, psi, eps);
    double scale = std::max(1.0, sup_val(sym, kK, 9));
    CHECK(sup_diff(sym, itp, kK, 9) < 1e-9 * scale);
  }

  // d^2 T(psi, psi) = 2 A(psi) B(psi).
  EvalSection a1 = A.differential(phi, {psi}, eps);
  EvalSection b1 = B.differential(phi, {psi}, eps);
  EvalSection d2 = T.differential(phi, {psi, psi}, eps);
  for (const Pt& x : grid_points(kK, 9))
    CHECK(d2.comp[0][0].eval(x) ==
          doctest::Approx(2.0 * a1.comp[0][0].eval(x) * b1.comp[0][0].eval(x))
              .epsilon(1e-12));

  // Beyond the polynomial degree both routes report zero.
  EvalSection d3 = T.differential(phi, {psi, psi, psi}, eps);
  for (const Pt& x : grid_points(kK, 9)) CHECK(d3.comp[0][0].eval(x) == 0.0);
  CHECK(sup_val(differential_interp(T, 3, phi, psi, eps), kK, 9) < 1e-9);
}

TEST_CASE("scalar multiplication and contraction act componentwise") {
  Box U2 = Box::rect(-2, 2, -2, 2);
  auto M2 = ChartedManifold::box(U2);
  auto tan2 = Bundle::tangent(M2);
  auto cov2 = Bundle::tensor(M2, 0, 1);
  auto line2 = Bundle::trivial(M2, 1);

  SmoothSection Xs(tan2, {{parse_expr("y"), parse_expr("x")}});
  GenSection X = GenSection::smooth(Xs);
  GenSection w = GenSection::embed(DistributionalSection(
      cov2, {{Distribution::density(U2, parse_expr("x^2")),
              Distribution::density(U2, parse_expr("y^2"))}}));
  GenSection f = embed1(line2, Distribution::density(U2, parse_expr("1 + 0.1*x*y")));

  PhiFamily phi = family_for({cov2, line2}, rho24());
  double eps = 0.25;
  Box K2 = Box::rect(-1, 1, -1, 1);

  EvalSection we = w.evaluate(phi, eps);
  EvalSection fe = f.evaluate(phi, eps);

  EvalSection fw = GenSection::scalar_mul(f, w).evaluate(phi, eps);
  for (const Pt& x : grid_points(K2, 7))
    for (int k = 0; k < 2; ++k)
      CHECK(fw.comp[0][k].eval(x) ==
            doctest::Approx(fe.comp[0][0].eval(x) * we.comp[0][k].eval(x)).epsilon(1e-13));

  GenSection c = GenSection::contract(GenSection::tensor(X, w), 0, 1);
  CHECK(c.bundle().fiber_dim() == 1);
  EvalSection ce = c.evaluate(phi, eps);
  for (const Pt& x : grid_points(K2, 7)) {
    double manual = Xs.comp_field(0, 0).eval(x) * we.comp[0][0].eval(x) +
                    Xs.comp_field(0, 1).eval(x) * we.comp[0][1].eval(x);
    CHECK(ce.comp[0][0].eval(x) == doctest::Approx(manual).epsilon(1e-12));
  }
}

TEST_CASE("the hat Lie derivative intertwines embedding with the classical action") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  auto tan = Bundle::tangent(M);
  auto cov = Bundle::tensor(M, 0, 1);
  Expr X0 = parse_expr("0.5 + 0.2*sin(x)");
  SmoothSection Xs(tan, {{X0}});
  Field Xf = Field::from_expr(X0);
  double eps = 0.25;

  // Scalar components: pure transport.
  {
    Distribution u = Distribution::delta(kU, pt0()) + Distribution::heaviside(kU);
    GenSection lhs = GenSection::lie_hat(Xs, embed1(line, u));
    GenSection rhs = embed1(line, u.lie({Xf}));
    PhiFamily phi = mollifier_family(line, rho4());
    CHECK(sup_diff(lhs.evaluate(phi, eps), rhs.evaluate(phi, eps), kK, 33) < 1e-9);
  }
  // Contravariant components pick up the -X' correction.
  {
    Distribution u = Distribution::delta(kU, pt0());
    Distribution Lu = u.lie({Xf}) + u.mul(parse_expr("-(0.2*cos(x))"));
    GenSection lhs = GenSection::lie_hat(Xs, embed1(tan, u));
    GenSection rhs = embed1(tan, Lu);
    PhiFamily phi = mollifier_family(tan, rho4());
    CHECK(sup_diff(lhs.evaluate(phi, eps), rhs.evaluate(phi, eps), kK, 33) < 1e-9);
  }
  // Covariant components pick up +X'.
  {
    Distribution u = Distribution::density(kU, parse_expr("sin(2*x)"));
    Distribution Lu = u.lie({Xf}) + u.mul(parse_expr("0.2*cos(x)"));
    GenSection lhs = GenSection::lie_hat(Xs, embed1(cov, u));
    GenSection rhs = embed1(cov, Lu);
    PhiFamily phi = mollifier_family(cov, rho4());
    CHECK(sup_diff(lhs.evaluate(phi, eps), rhs.evaluate(phi, eps), kK, 33) < 1e-9);
  }
}

TEST_CASE("both Lie derivatives are derivations over the tensor product") {
  auto M = M1();
  auto tan = Bundle::tangent(M);
  auto cov = Bundle::tensor(M, 0, 1);
  SmoothSection Xs(tan, {{parse_expr("0.5 + 0.2*sin(x)")}});
  GenSection a = embed1(tan, Distribution::delta(kU, pt0()));
  GenSection b = embed1(cov, Distribution::density(kU, parse_expr("sin(x) + 2")));
  GenSection T = GenSection::tensor(a, b);
  PhiFamily phi = family_for({tan, cov}, rho4());
  double eps = 0.25;

  GenSection lhs = GenSection::lie_hat(Xs, T);
  GenSection rhs = GenSection::lin_comb(
      {1.0, 1.0}, {GenSection::tensor(GenSection::lie_hat(Xs, a), b),
                   GenSection::tensor(a, GenSection::lie_hat(Xs, b))});
  CHECK(sup_diff(lhs.evaluate(phi, eps), rhs.evaluate(phi, eps), kK, 17) < 1e-10);

  GenSection Xg = embed1(tan, Distribution::density(kU, parse_expr("1 + 0.25*x^2")));
  GenSection lhs_t = GenSection::lie_tilde(Xg, T);
  GenSection rhs_t = GenSection::lin_comb(
      {1.0, 1.0}, {GenSection::tensor(GenSection::lie_tilde(Xg, a), b),
                   GenSection::tensor(a, GenSection::lie_tilde(Xg, b))});
  CHECK(sup_diff(lhs_t.evaluate(phi, eps), rhs_t.evaluate(phi, eps), kK, 17) < 1e-10);
}

TEST_CASE("the generalized bracket is antisymmetric and satisfies Jacobi") {
  auto M = M1();
  auto tan = Bundle::tangent(M);
  GenSection X = embed1(tan, Distribution::density(kU, parse_expr("1 + 0.25*x^2")));
  GenSection Y = GenSection::smooth(SmoothSection(tan, {{parse_expr("sin(0.5*x) + 2")}}));
  GenSection Z = embed1(tan, Distribution::density(kU, parse_expr("0.5*x")));
  PhiFamily phi = mollifier_family(tan, rho4());
  double eps = 0.25;
  auto br = [](const GenSection& A, const GenSection& B) {
    return GenSection::bracket(A, B);
  };

  GenSection anti = GenSection::lin_comb({1.0, 1.0}, {br(X, Y), br(Y, X)});
  CHECK(sup_val(anti.evaluate(phi, eps), kK, 17) < 1e-12);

  GenSection jac = GenSection::lin_comb(
      {1.0, 1.0, 1.0}, {br(br(X, Y), Z), br(br(Y, Z), X), br(br(Z, X), Y)});
  CHECK(sup_val(jac.evaluate(phi, eps), kK, 17) < 1e-9);
}

TEST_CASE("generalized connections satisfy the connection axioms") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  auto tan = Bundle::tangent(M);
  auto chr = Bundle::tensor_pattern(M, {true, false, false});
  auto dd = Bundle::tensor(M, 0, 2);

  SmoothConnection c0(M, {{parse_expr("0.2*x")}});
  GenConnection Gs = GenConnection::smooth(c0);
  GenConnection Ga = GenConnection::affine(
      c0, embed1(chr, Distribution::density(kU, parse_expr("0.3*cos(x)"))));
  GenConnection Gm = GenConnection::metric_lc(
      embed1(dd, Distribution::density(kU, parse_expr("2 + 0.3*sin(x)"))));

  GenSection X = GenSection::smooth(SmoothSection(tan, {{parse_expr("0.5 + 0.2*sin(x)")}}));
  GenSection Y = GenSection::smooth(SmoothSection(tan, {{parse_expr("1 - 0.1*x")}}));
  GenSection r = embed1(tan, Distribution::delta(kU, pt0()));
  GenSection s = GenSection::smooth(SmoothSection(tan, {{parse_expr("x^2 + 1")}}));
  GenSection f = embed1(line, Distribution::density(kU, parse_expr("1 + 0.25*x^2")));

  PhiFamily phi = family_for({line, tan, chr, dd}, rho4());
  double eps = 0.25;

  struct Case {
    GenConnection conn;
    double tol;
  };
  for (const Case& c : {Case{Gs, 1e-10}, Case{Ga, 1e-10}, Case{Gm, 1e-9}}) {
    // Additivity in the section argument.
    GenSection l1 = cov_deriv(c.conn, X, GenSection::lin_comb({1.0, 1.0}, {r, s}));
    GenSection r1 = GenSection::lin_comb({1.0, 1.0},
                                         {cov_deriv(c.conn, X, r), cov_deriv(c.conn, X, s)});
    CHECK(sup_diff(l1.evaluate(phi, eps), r1.evaluate(phi, eps), kK, 17) < c.tol);

    // Additivity in the direction.
    GenSection l2 = cov_deriv(c.conn, GenSection::lin_comb({1.0, 1.0}, {X, Y}), r);
    GenSection r2 = GenSection::lin_comb({1.0, 1.0},
                                         {cov_deriv(c.conn, X, r), cov_deriv(c.conn, Y, r)});
    CHECK(sup_diff(l2.evaluate(phi, eps), r2.evaluate(phi, eps), kK, 17) < c.tol);

    // Function linearity in the direction.
    GenSection l3 = cov_deriv(c.conn, GenSection::scalar_mul(f, X), r);
    GenSection r3 = GenSection::scalar_mul(f, cov_deriv(c.conn, X, r));
    CHECK(sup_diff(l3.evaluate(phi, eps), r3.evaluate(phi, eps), kK, 17) < c.tol);

    // Leibniz against the transported scalar derivative.
    GenSection l4 = cov_deriv(c.conn, X, GenSection::scalar_mul(f, r));
    GenSection r4 = GenSection::lin_comb(
        {1.0, 1.0}, {GenSection::scalar_mul(GenSection::lie_tilde(X, f), r),
                     GenSection::scalar_mul(f, cov_deriv(c.conn, X, r))});
    CHECK(sup_diff(l4.evaluate(phi, eps), r4.evaluate(phi, eps), kK, 17) < c.tol);
  }

  CHECK(cov_deriv(Gs, X, r).polynomial());
  CHECK(cov_deriv(Ga, X, r).polynomial());
  CHECK(!cov_deriv(Gm, X, r).polynomial());
}

TEST_CASE("the generalized Levi-Civita connection matches the classical one on smooth metrics") {
  Box U2 = Box::rect(-2, 2, -2, 2);
  auto M2 = ChartedManifold::box(U2);
  auto dd2 = Bundle::tensor(M2, 0, 2);
  Expr c = parse_expr("1 + 0.1*x + 0.05*y^2");
  Expr z = parse_expr("0");
  SmoothSection gs(dd2, {{c, z, z, c}});
  GenConnection conn = levi_civita(GenSection::smooth(gs));
  CHECK(!conn.polynomial());
  CHECK(conn.metric().has_value());
  CHECK(!conn.difference().has_value());

  PhiFamily none;
  double eps = 0.25;
  Box K2 = Box::rect(-1.5, 1.5, -1.5, 1.5);

  auto gamma = conn.christoffels(none, eps);
  SmoothConnection cl = SmoothConnection::levi_civita(gs);
  double dg = 0;
  for (const Pt& x : grid_points(K2, 9))
    for (int k = 0; k < 2; ++k)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          dg = std::max(dg, std::abs(gamma[0][(k * 2 + i) * 2 + j].eval(x) -
                                     Field::from_expr(cl.christoffel(0, k, i, j)).eval(x)));
  CHECK(dg < 1e-10);

  EvalSection R = curvature_tensor(conn, none, eps);
  SmoothSection Rc = classical_curvature(cl);
  double dr = 0;
  for (const Pt& x : grid_points(K2, 7)) {
    std::vector<double> vals = Rc.eval(0, x);
    for (int idx = 0; idx < 16; ++idx)
      dr = std::max(dr, std::abs(R.comp[0][idx].eval(x) - vals[idx]));
  }
  CHECK(dr < 1e-8);

  conn.verify_nonsingular(none, {0.25, 0.125}, 0, K2, 9, 1e-6, 0);
  CHECK(thrown_with([&] { conn.verify_nonsingular(none, {0.25}, 0, K2, 9, 10.0, 0); },
                    "metric determinant"));
}

TEST_CASE("flat connections have exactly zero curvature") {
  Box U2 = Box::rect(-2, 2, -2, 2);
  auto M2 = ChartedManifold::box(U2);
  PhiFamily none;
  Box K2 = Box::rect(-1, 1, -1, 1);

  EvalSection R = curvature_tensor(GenConnection::smooth(SmoothConnection::flat(M2)),
                                   none, 0.25);
  for (const Pt& x : grid_points(K2, 5))
    for (int idx = 0; idx < 16; ++idx) CHECK(R.comp[0][idx].eval(x) == 0.0);

  // Same through the metric route with the identity metric.
  auto dd2 = Bundle::tensor(M2, 0, 2);
  Expr one = parse_expr("1"), z = parse_expr("0");
  GenConnection gm = levi_civita(GenSection::smooth(SmoothSection(dd2, {{one, z, z, one}})));
  EvalSection R2 = curvature_tensor(gm, none, 0.25);
  for (const Pt& x : grid_points(K2, 5))
    for (int idx = 0; idx < 16; ++idx) CHECK(R2.comp[0][idx].eval(x) == 0.0);
}

TEST_CASE("restriction collapses to the plain evaluation on interior compacts") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  auto tan = Bundle::tangent(M);
  Distribution u = Distribution::delta(kU, pt0()) +
                   Distribution::density(kU, parse_expr("sin(x)"));
  GenSection F = GenSection::smooth(SmoothSection::scalar(M, parse_expr("1 + 0.1*x^2")));
  SmoothSection Xs(tan, {{parse_expr("0.5 + 0.2*sin(x)")}});

  GenSection plain = embed1(line, u);
  GenSection mul = GenSection::scalar_mul(F, plain);
  GenSection hat = GenSection::lie_hat(Xs, mul);

  Box V = Box::interval(-1.0, 1.0), W = Box::interval(-0.5, 0.5);
  PartitionSpec spec;
  spec.name = "interval";
  PartitionPiece p;
  p.chi_plateau = Box::interval(-0.9, 0.9);
  p.chi_support = Box::interval(-1.0, 1.0);
  p.theta_plateau = Box::interval(-1.2, 1.2);
  p.theta_support = Box::interval(-1.6, 1.6);
  spec.pieces.push_back(p);

  VectorOpNet pnet = VectorOpNet::mollifier_net(rho4(), kU, 1);
  VectorOpNet rnet = restrict_so(pnet, V, spec);
  PhiFamily phi;
  phi.assign(line, {pnet});
  auto MV = ChartedManifold::box(V);
  PhiFamily phiV;
  phiV.assign(Bundle::from_id(MV, "trivial 1"), {rnet});

  double e0 = rnet.dyadic_eps0(W);
  REQUIRE(e0 > 0);
  for (const GenSection& R : {plain, mul, hat}) {
    GenSection RV = R.restricted(V);
    CHECK(RV.bundle().base().chart_box(0).lo[0] == -1.0);
    for (double eps : {e0, 0.5 * e0}) {
      std::vector<double> va = R.evaluate(phi, eps).values(0, W, 33, 0);
      std::vector<double> vb = RV.evaluate(phiV, eps).values(0, W, 33, 0);
      for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
    }
  }

  // Nested restriction composes on the nose.
  Box Wb = Box::interval(-0.6, 0.6);
  CHECK(hat.restricted(V).restricted(Wb).serialize() == hat.restricted(Wb).serialize());

  CHECK(thrown_with([&] { hat.restricted(Box::interval(-3.0, 0.0)); }, "must sit inside"));
}

TEST_CASE("pushforward intertwines embedding across affine bundle isomorphisms") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  Distribution u = Distribution::delta(kU, pt0()) +
                   Distribution::density(kU, parse_expr("sin(x)"));
  DistributionalSection usec(line, {{u}});

  Pt shift = pt0();
  shift[0] = 0.7;
  BundleIso tr = BundleIso::translation(kU, shift);
  BundleIso lin = BundleIso::linear(kU, 2.0);
  lin.fiber = {parse_expr("2")};
  lin.fiber_inv = {parse_expr("0.5")};

  struct Case {
    BundleIso iso;
    Box K;
  };
  for (const Case& c : {Case{tr, Box::interval(-0.3, 1.7)}, Case{lin, Box::interval(-1.5, 1.5)}}) {
    GenSection lhs = GenSection::pushforward(c.iso, GenSection::embed(usec));
    GenSection rhs = GenSection::embed(pushforward_dist(c.iso, usec));
    CHECK(lhs.index_set() == rhs.index_set());
    CHECK(lhs.polynomial());
    CHECK(lhs.total_degree() == 1);

    auto lineTo = rhs.bundle_ptr();
    PhiFamily phiTo = mollifier_family(lineTo, rho4());
    for (double eps : {0.25, 0.125})
      CHECK(sup_diff(lhs.evaluate(phiTo, eps), rhs.evaluate(phiTo, eps), c.K, 17) < 1e-10);

    PhiFamily psiTo = dir_family({lineTo}, rho4(), rho2());
    EvalSection d1 = lhs.differential(phiTo, {psiTo}, 0.25);
    EvalSection i1 = differential_interp(lhs, 1, phiTo, psiTo, 0.25);
    double scale = std::max(1.0, sup_val(d1, c.K, 9));
    CHECK(sup_diff(d1, i1, c.K, 9) < 1e-9 * scale);
  }

  GenSection pushed = GenSection::pushforward(tr, GenSection::embed(usec));
  CHECK(thrown_with([&] { pushed.restricted(Box::interval(0.0, 1.0)); }, "pushforward"));
}

TEST_CASE("evaluation demands a test object for every bundle in the index set") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  auto tan = Bundle::tangent(M);
  GenSection A = embed1(line, Distribution::delta(kU, pt0()));
  GenSection B = embed1(tan, Distribution::density(kU, parse_expr("x")));
  GenSection T = GenSection::tensor(A, B);

  std::vector<std::string> keys = T.index_set();
  REQUIRE(keys.size() == 2);
  CHECK(std::find(keys.begin(), keys.end(), PhiFamily::key(*line)) != keys.end());
  CHECK(std::find(keys.begin(), keys.end(), PhiFamily::key(*tan)) != keys.end());
  CHECK(T.degree(*line) == 1);
  CHECK(T.degree(*tan) == 1);
  CHECK(T.total_degree() == 2);
  CHECK(GenSection::lin_comb({1.0, 1.0}, {A, A}).total_degree() == 1);

  PhiFamily phi = mollifier_family(line, rho4());
  CHECK(thrown_with([&] { T.evaluate(phi, 0.25); }, PhiFamily::key(*tan).c_str()));
}

TEST_CASE("differentials through metric connections fall back to a finite difference") {
  auto M = M1();
  auto tan = Bundle::tangent(M);
  auto dd = Bundle::tensor(M, 0, 2);
  GenSection gG = embed1(dd, Distribution::density(kU, parse_expr("2 + 0.5*sin(x)")));
  GenConnection conn = levi_civita(gG);
  GenSection X = GenSection::smooth(SmoothSection(tan, {{parse_expr("1")}}));
  GenSection s = GenSection::smooth(SmoothSection(tan, {{parse_expr("x^2 + 1")}}));
  GenSection r = cov_deriv(conn, X, s);
  CHECK(!r.polynomial());

  PhiFamily phi = mollifier_family(dd, rho4());
  PhiFamily psi = dir_family({dd}, rho4(), rho2());
  double eps = 0.25;

  EvalSection d1 = r.differential(phi, {psi}, eps);
  Field gh = gG.evaluate(phi, eps).comp[0][0];
  Field ph = gG.differential(phi, {psi}, eps).comp[0][0];
  // One dimension: Gamma = g'/(2g), so dGamma(psi) = (psi' g - psi g')/(2 g^2),
  // and with X = 1 the tree is s' + Gamma s.
  for (const Pt& x : grid_points(kK, 17)) {
    double g = gh.eval(x), gp = gh.d(0).eval(x);
    double pv = ph.eval(x), pp = ph.d(0).eval(x);
    double sv = x[0] * x[0] + 1.0;
    double expect = 0.5 * (pp * g - pv * gp) / (g * g) * sv;
    CHECK(std::abs(d1.comp[0][0].eval(x) - expect) < 2e-7);
  }

  // Interpolation runs the same stencil for non-polynomial trees.
  CHECK(sup_diff(d1, differential_interp(r, 1, phi, psi, eps), kK, 9) == 0.0);
  EvalSection d2 = r.differential(phi, {psi, psi}, eps);
  CHECK(sup_diff(d2, differential_interp(r, 2, phi, psi, eps), kK, 9) == 0.0);

  PhiFamily other = mollifier_family(dd, rho2());
  CHECK(thrown_with([&] { r.differential(phi, {psi, other}, eps); },
                    "identical directions"));
}

TEST_CASE("random polynomial trees differentiate consistently with interpolation") {
  treegen::Pool P;
  std::mt19937 rng(20240817u);
  const std::vector<std::vector<bool>> pats = {{}, {true}, {false}, {true, false}};
  int checked = 0;
  for (int t = 0; t < 20; ++t) {
    GenSection r = treegen::random_tree(rng, P, pats[size_t(t) % 4], 3);
    REQUIRE(r.valid());
    CHECK(r.polynomial());
    for (int j : {1, 2}) {
      EvalSection sym = r.differential(P.phi, std::vector<PhiFamily>(size_t(j), P.psi), 0.25);
      EvalSection itp = differential_interp(r, j, P.phi, P.psi, 0.25);
      double scale = std::max({1.0, sup_val(sym, kK, 7), sup_val(itp, kK, 7)});
      CHECK(sup_diff(sym, itp, kK, 7) < 1e-9 * scale);
      ++checked;
    }
  }
  CHECK(checked == 40);
}

TEST_CASE("field tensor calculus matches the symbolic classical operators") {
  Box U2 = Box::rect(-2, 2, -2, 2);
  auto M2 = ChartedManifold::box(U2);
  auto tan2 = Bundle::tangent(M2);
  SmoothSection X(tan2, {{parse_expr("sin(x) + 2"), parse_expr("x*y")}});
  SmoothSection s(tan2, {{parse_expr("x^2"), parse_expr("x + y^2")}});
  std::vector<Field> Xf = {X.comp_field(0, 0), X.comp_field(0, 1)};
  std::vector<Field> sf = {s.comp_field(0, 0), s.comp_field(0, 1)};
  Box K2 = Box::rect(-1, 1, -1, 1);

  SmoothSection cl = classical_lie(X, s);
  std::vector<Field> lf = field_lie(Xf, sf, {true}, 2);
  for (const Pt& x : grid_points(K2, 7)) {
    std::vector<double> want = cl.eval(0, x);
    for (int i = 0; i < 2; ++i) CHECK(std::abs(lf[size_t(i)].eval(x) - want[size_t(i)]) < 1e-12);
  }

  SmoothConnection c2(M2, {{parse_expr("0.1*x"), parse_expr("0.05*y"), parse_expr("0.2*y"),
                            parse_expr("0"), parse_expr("0.1"), parse_expr("-(0.05*x)"),
                            parse_expr("0"), parse_expr("0.15*x*y")}});
  std::vector<Field> gamma;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) gamma.push_back(Field::from_expr(c2.christoffel(0, k, i, j)));

  SmoothSection cd = classical_covderiv(c2, X, s);
  std::vector<Field> cf = field_covderiv(gamma, Xf, sf, {true}, 2);
  for (const Pt& x : grid_points(K2, 7)) {
    std::vector<double> want = cd.eval(0, x);
    for (int i = 0; i < 2; ++i) CHECK(std::abs(cf[size_t(i)].eval(x) - want[size_t(i)]) < 1e-12);
  }

  SmoothSection cc = classical_curvature(c2);
  std::vector<Field> rf = field_curvature(gamma, 2);
  for (const Pt& x : grid_points(K2, 5)) {
    std::vector<double> want = cc.eval(0, x);
    for (int idx = 0; idx < 16; ++idx)
      CHECK(std::abs(rf[size_t(idx)].eval(x) - want[size_t(idx)]) < 1e-10);
  }

  // Pointwise matrix inverse: values and the exact derivative rule.
  std::vector<Field> g = {Field::from_expr(parse_expr("2 + x^2")),
                          Field::from_expr(parse_expr("x*y")),
                          Field::from_expr(parse_expr("x*y")),
                          Field::from_expr(parse_expr("3 + y^2"))};
  Field inv00 = matrix_inv_entry(g, 2, 0, 0);
  Field inv01 = matrix_inv_entry(g, 2, 0, 1);
  for (const Pt& x : grid_points(K2, 7)) {
    double det = (2 + x[0] * x[0]) * (3 + x[1] * x[1]) - x[0] * x[1] * x[0] * x[1];
    CHECK(std::abs(inv00.eval(x) - (3 + x[1] * x[1]) / det) < 1e-12);
    CHECK(std::abs(inv01.eval(x) - (-(x[0] * x[1])) / det) < 1e-12);
    Pt y = x;
    double fd = oracle::fd_deriv(
        [&](double t) {
          Pt z = y;
          z[0] = t;
          return inv00.eval(z);
        },
        x[0]);
    CHECK(std::abs(inv00.d(0).eval(x) - fd) < 1e-6);
  }
}

TEST_CASE("expression trees serialize to flat text and back") {
  auto M = M1();
  auto line = Bundle::trivial(M, 1);
  auto tan = Bundle::tangent(M);
  auto cov = Bundle::tensor(M, 0, 1);
  auto chr = Bundle::tensor_pattern(M, {true, false, false});
  auto dd = Bundle::tensor(M, 0, 2);

  SmoothSection Xs(tan, {{parse_expr("0.5 + 0.2*sin(x)")}});
  SmoothConnection c0(M, {{parse_expr("0.2*x")}});
  GenSection a = embed1(tan, Distribution::delta(kU, pt0()));
  GenSection b = embed1(cov, Distribution::density(kU, parse_expr("sin(x) + 2")));
  GenSection h = embed1(line, Distribution::heaviside(kU));
  GenSection Xg = GenSection::smooth(Xs);

  GenSection big = GenSection::lin_comb(
      {1.0, -0.5},
      {GenSection::lie_hat(Xs, GenSection::scalar_mul(
                                   h, GenSection::contract(GenSection::tensor(a, b), 0, 1))),
       GenSection::contract(
           GenSection::tensor(GenSection::lie_tilde(Xg, a), b), 0, 1)});

  PhiFamily phi = family_for({line, tan, cov}, rho4());
  std::string s1 = big.serialize();
  GenSection back = GenSection::deserialize(s1);
  std::string s2 = back.serialize();
  CHECK(s2 == GenSection::deserialize(s2).serialize());
  CHECK(sup_diff(big.evaluate(phi, 0.25), back.evaluate(phi, 0.25), kK, 17) < 1e-12);

  // Connection payloads and pushforwards ride along.
  GenConnection Ga = GenConnection::affine(
      c0, embed1(chr, Distribution::density(kU, parse_expr("0.3*cos(x)"))));
  GenSection ct = cov_deriv(Ga, Xg, a);
  PhiFamily phic = family_for({tan, chr}, rho4());
  GenSection ct2 = GenSection::deserialize(ct.serialize());
  CHECK(sup_diff(ct.evaluate(phic, 0.25), ct2.evaluate(phic, 0.25), kK, 17) < 1e-12);

  GenConnection Gm = GenConnection::metric_lc(
      embed1(dd, Distribution::density(kU, parse_expr("2 + 0.3*sin(x)"))));
  GenSection mt = cov_deriv(Gm, Xg, a);
  PhiFamily phim = family_for({tan, dd}, rho4());
  GenSection mt2 = GenSection::deserialize(mt.serialize());
  CHECK(sup_diff(mt.evaluate(phim, 0.25), mt2.evaluate(phim, 0.25), kK, 17) < 1e-12);

  BundleIso lin = BundleIso::linear(kU, 2.0);
  lin.fiber = {parse_expr("2")};
  lin.fiber_inv = {parse_expr("0.5")};
  GenSection pu = GenSection::pushforward(lin, a);
  GenSection pu2 = GenSection::deserialize(pu.serialize());
  PhiFamily phip = mollifier_family(pu.bundle_ptr(), rho4());
  Box Kp = Box::interval(-1.5, 1.5);
  CHECK(sup_diff(pu.evaluate(phip, 0.25), pu2.evaluate(phip, 0.25), Kp, 17) < 1e-12);

  // Malformed inputs are refused with position-carrying errors.
  CHECK_THROWS_AS(GenSection::deserialize(""), ConfigError);
  CHECK_THROWS_AS(GenSection::deserialize("[gensec]\nversion = 1\nnodes = 1\n"), ConfigError);
  std::string bad = s1;
  size_t at = bad.find("kind = lincomb");
  REQUIRE(at != std::string::npos);
  bad.replace(at, 14, "kind = frobnicate");
  CHECK(thrown_with([&] { GenSection::deserialize(bad); }, "unknown node kind"));

  // Bundles without a reconstructible identity cannot be serialized.
  auto gen = Bundle::generic(M, 1, {}, "opaque");
  GenSection og = embed1(gen, Distribution::delta(kU, pt0()));
  CHECK(thrown_with([&] { og.serialize(); }, "no serializable identity"));
}
