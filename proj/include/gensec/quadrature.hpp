#pragma once

#include <functional>

#include "gensec/common.hpp"

namespace gensec {

using Fn1 = std::function<double(double)>;
using FnN = std::function<double(const double*)>;

// Adaptive Gauss-Kronrod (G7,K15). Absolute tolerance; throws QuadratureError
// with the achieved estimate when subdivision cannot reach it.
double integrate_1d(const Fn1& f, double a, double b, double abs_tol,
                    int max_depth = 44);

// Iterated adaptive integration over a bounded box (n <= 3).
double integrate(const FnN& f, const Box& box, double abs_tol);

// Fixed tensor Gauss-Legendre rule, `panels` subdivisions per axis. Fast path
// for analytic integrands on known support boxes; accuracy is the caller's
// responsibility (cross-checked against the adaptive rule in tests).
double integrate_panels(const FnN& f, const Box& box, int order, int panels);

// Nodes/weights of the `order`-point Gauss-Legendre rule on [-1,1].
void gauss_legendre(int order, std::vector<double>& nodes,
                    std::vector<double>& weights);

}  // namespace gensec
