#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace gensec {

// Everything lives in chart coordinates of dimension <= 3.
inline constexpr int kMaxDim = 3;

using Pt = std::array<double, kMaxDim>;
using MIdx = std::array<int, kMaxDim>;  // derivative multi-index, unused axes 0

inline Pt pt0() { return {0.0, 0.0, 0.0}; }
inline MIdx midx0() { return {0, 0, 0}; }

inline MIdx midx1(int axis) {
  MIdx a = midx0();
  a[axis] = 1;
  return a;
}

inline int order(const MIdx& a) { return a[0] + a[1] + a[2]; }

inline MIdx operator+(const MIdx& a, const MIdx& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline bool leq(const MIdx& a, const MIdx& b) {
  return a[0] <= b[0] && a[1] <= b[1] && a[2] <= b[2];
}

inline MIdx operator-(const MIdx& a, const MIdx& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

double binom(int n, int k);
double midx_binom(const MIdx& a, const MIdx& b);  // product of per-axis binomials

// All multi-indices with order(a) <= max_order on the first n axes,
// sorted by order then lexicographically. Deterministic.
std::vector<MIdx> midx_upto(int n, int max_order);

std::string midx_str(const MIdx& a, int n);

// Axis-aligned box, possibly unbounded. Unused axes carry [0,0].
struct Box {
  Pt lo{}, hi{};
  int n = 1;

  static Box whole(int n);
  static Box interval(double a, double b);
  static Box rect(double ax, double bx, double ay, double by);
  static Box point(const Pt& p, int n);

  bool empty() const;
  bool contains(const Pt& p) const;
  double width(int axis) const { return hi[axis] - lo[axis]; }
  Box intersect(const Box& o) const;
  Box pad(double r) const;     // grow by r on every bounded axis
  Box shrink(double r) const;  // may become empty
  // Euclidean distance from this box to a point / to the complement of outer.
  double dist_to_point(const Pt& p) const;
  double margin_inside(const Box& outer) const;
  bool bounded() const;
  std::string str() const;
};

// Uniform sample grid over a box: k points per axis, cell-centered so that
// samples never sit exactly on the boundary.
std::vector<Pt> grid_points(const Box& b, int per_axis);

inline constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace gensec
