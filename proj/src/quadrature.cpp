#include "gensec/quadrature.hpp"

#include <algorithm>
#include <queue>
#include <cmath>

#include "gensec/errors.hpp"

namespace gensec {

namespace {

// QUADPACK dqk15 constants: 15-point Kronrod extension of 7-point Gauss.
const double kXgk[8] = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144838258730, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
const double kWgk[8] = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
const double kWg[4] = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct GK {
  double integral;  // K15
  double err;       // |K15 - G7|
  double resabs;    // K15 estimate of integral of |f|
};

GK gk15(const Fn1& f, double a, double b) {
  double c = 0.5 * (a + b), h = 0.5 * (b - a);
  double fc = f(c);
  double resg = fc * kWg[3];
  double resk = fc * kWgk[7];
  double resa = std::abs(fc) * kWgk[7];
  for (int j = 0; j < 7; ++j) {
    double x = h * kXgk[j];
    double f1 = f(c - x), f2 = f(c + x);
    resk += kWgk[j] * (f1 + f2);
    resa += kWgk[j] * (std::abs(f1) + std::abs(f2));
    if (j % 2 == 1) resg += kWg[j / 2] * (f1 + f2);
  }
  return {resk * h, std::abs((resk - resg) * h), resa * h};
}

struct Seg {
  double a, b, integral, err, resabs;
  int depth;
  bool operator<(const Seg& o) const {
    // max-heap on error, interval start breaks ties deterministically
    if (err != o.err) return err < o.err;
    return a < o.a;
  }
};

}  // namespace

// Globally adaptive: always split the segment with the largest error estimate.
// Accepts when the total error reaches abs_tol or the floating-point floor
// (relative to integral |f|), whichever is larger; throws when neither is
// reachable within the interval budget.
double integrate_1d(const Fn1& f, double a, double b, double abs_tol, int max_depth) {
  if (a >= b) return 0.0;
  std::priority_queue<Seg> heap;
  GK first = gk15(f, a, b);
  double total_err = first.err;
  double resabs = first.resabs;
  heap.push({a, b, first.integral, first.err, first.resabs, 0});
  int splits = 0;
  const int budget = 2000;
  double finalized_sum = 0.0, finalized_err = 0.0;
  // Large-magnitude integrands (high-order kernel derivatives) carry pointwise
  // evaluation noise far above eps*resabs; once splitting small segments stops
  // reducing their error estimates the result is noise-limited, not divergent.
  int stall = 0;
  const double stall_len = (b - a) / 1024.0;
  auto floor_for = [&] { return 50.0 * 2.220446049250313e-16 * resabs; };
  while (total_err + finalized_err > std::max(abs_tol, floor_for()) &&
         !heap.empty() && splits < budget) {
    Seg worst = heap.top();
    heap.pop();
    total_err -= worst.err;
    if (worst.depth >= max_depth) {
      finalized_sum += worst.integral;
      finalized_err += worst.err;
      continue;
    }
    double mid = 0.5 * (worst.a + worst.b);
    GK l = gk15(f, worst.a, mid), r = gk15(f, mid, worst.b);
    if (l.err + r.err > 0.999 * worst.err && worst.b - worst.a < stall_len) ++stall;
    resabs += l.resabs + r.resabs - worst.resabs;
    heap.push({worst.a, mid, l.integral, l.err, l.resabs, worst.depth + 1});
    heap.push({mid, worst.b, r.integral, r.err, r.resabs, worst.depth + 1});
    total_err += l.err + r.err;
    ++splits;
  }
  double sum = finalized_sum;
  while (!heap.empty()) {
    sum += heap.top().integral;
    heap.pop();
  }
  double achieved = total_err + finalized_err;
  if (stall < 30 && achieved > std::max(abs_tol * 8, floor_for() * 4) + 1e-300)
    throw QuadratureError("quadrature did not converge on [" + std::to_string(a) +
                              "," + std::to_string(b) + "]",
                          achieved);
  return sum;
}

static double integrate_axes(const FnN& f, const Box& box, double abs_tol, int axis,
                             double* x) {
  double w = std::max(1.0, box.hi[axis] - box.lo[axis]);
  if (axis == box.n - 1) {
    return integrate_1d(
        [&](double t) {
          x[axis] = t;
          return f(x);
        },
        box.lo[axis], box.hi[axis], abs_tol);
  }
  double inner_tol = abs_tol / (2.0 * w);
  return integrate_1d(
      [&](double t) {
        x[axis] = t;
        return integrate_axes(f, box, inner_tol, axis + 1, x);
      },
      box.lo[axis], box.hi[axis], abs_tol * 0.5);
}

double integrate(const FnN& f, const Box& box, double abs_tol) {
  if (box.empty()) return 0.0;
  if (!box.bounded()) throw ConstructionError("cannot integrate over unbounded box " + box.str());
  double x[kMaxDim] = {0, 0, 0};
  return integrate_axes(f, box, abs_tol, 0, x);
}

void gauss_legendre(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(order, 0.0);
  weights.assign(order, 0.0);
  for (int i = 0; i < (order + 1) / 2; ++i) {
    // Chebyshev initial guess, Newton on P_order.
    double xg = std::cos(3.14159265358979323846 * (i + 0.75) / (order + 0.5));
    double p_prime = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = xg;
      for (int k = 2; k <= order; ++k) {
        double p2 = ((2.0 * k - 1.0) * xg * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      p_prime = order * (xg * p1 - p0) / (xg * xg - 1.0);
      double dx = p1 / p_prime;
      xg -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    nodes[i] = -xg;
    nodes[order - 1 - i] = xg;
    double w = 2.0 / ((1.0 - xg * xg) * p_prime * p_prime);
    weights[i] = w;
    weights[order - 1 - i] = w;
  }
}

double integrate_panels(const FnN& f, const Box& box, int order, int panels) {
  if (box.empty()) return 0.0;
  static thread_local std::vector<double> nodes, weights;
  static thread_local int cached_order = -1;
  if (cached_order != order) {
    gauss_legendre(order, nodes, weights);
    cached_order = order;
  }
  // Per-axis sample positions and weights.
  std::array<std::vector<double>, kMaxDim> pos, wt;
  for (int ax = 0; ax < box.n; ++ax) {
    double w = box.hi[ax] - box.lo[ax];
    double pw = w / panels;
    for (int p = 0; p < panels; ++p) {
      double lo = box.lo[ax] + p * pw;
      for (int k = 0; k < order; ++k) {
        pos[ax].push_back(lo + 0.5 * pw * (1.0 + nodes[k]));
        wt[ax].push_back(0.5 * pw * weights[k]);
      }
    }
  }
  int m = order * panels;
  double x[kMaxDim] = {0, 0, 0};
  double total = 0.0;
  if (box.n == 1) {
    for (int i = 0; i < m; ++i) {
      x[0] = pos[0][i];
      total += wt[0][i] * f(x);
    }
  } else if (box.n == 2) {
    for (int i = 0; i < m; ++i) {
      x[0] = pos[0][i];
      double row = 0.0;
      for (int j = 0; j < m; ++j) {
        x[1] = pos[1][j];
        row += wt[1][j] * f(x);
      }
      total += wt[0][i] * row;
    }
  } else {
    for (int i = 0; i < m; ++i) {
      x[0] = pos[0][i];
      double sheet = 0.0;
      for (int j = 0; j < m; ++j) {
        x[1] = pos[1][j];
        double row = 0.0;
        for (int k = 0; k < m; ++k) {
          x[2] = pos[2][k];
          row += wt[2][k] * f(x);
        }
        sheet += wt[1][j] * row;
      }
      total += wt[0][i] * sheet;
    }
  }
  return total;
}

}  // namespace gensec
