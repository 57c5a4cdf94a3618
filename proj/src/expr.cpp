#include "gensec/expr.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "gensec/errors.hpp"

namespace gensec {

double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 0; i < k; ++i) r = r * double(n - i) / double(i + 1);
  return r;
}

double midx_binom(const MIdx& a, const MIdx& b) {
  return binom(a[0], b[0]) * binom(a[1], b[1]) * binom(a[2], b[2]);
}

std::vector<MIdx> midx_upto(int n, int max_order) {
  std::vector<MIdx> out;
  for (int total = 0; total <= max_order; ++total) {
    for (int i = 0; i <= total; ++i) {
      for (int j = 0; j + i <= total; ++j) {
        int k = total - i - j;
        MIdx a = {i, j, k};
        bool ok = true;
        for (int ax = n; ax < kMaxDim; ++ax)
          if (a[ax] != 0) ok = false;
        if (ok) out.push_back(a);
      }
    }
  }
  return out;
}

std::string midx_str(const MIdx& a, int n) {
  std::string s = "(";
  for (int i = 0; i < n; ++i) {
    if (i) s += ",";
    s += std::to_string(a[i]);
  }
  return s + ")";
}

Box Box::whole(int n_) {
  Box b;
  b.n = n_;
  for (int i = 0; i < n_; ++i) {
    b.lo[i] = -kInf;
    b.hi[i] = kInf;
  }
  return b;
}

Box Box::interval(double a, double b) {
  Box r;
  r.n = 1;
  r.lo[0] = a;
  r.hi[0] = b;
  return r;
}

Box Box::rect(double ax, double bx, double ay, double by) {
  Box r;
  r.n = 2;
  r.lo = {ax, ay, 0};
  r.hi = {bx, by, 0};
  return r;
}

Box Box::point(const Pt& p, int n_) {
  Box r;
  r.n = n_;
  r.lo = p;
  r.hi = p;
  return r;
}

bool Box::empty() const {
  for (int i = 0; i < n; ++i)
    if (lo[i] > hi[i]) return true;
  return false;
}

bool Box::contains(const Pt& p) const {
  for (int i = 0; i < n; ++i)
    if (p[i] < lo[i] || p[i] > hi[i]) return false;
  return true;
}

Box Box::intersect(const Box& o) const {
  Box r = *this;
  for (int i = 0; i < n; ++i) {
    r.lo[i] = std::max(lo[i], o.lo[i]);
    r.hi[i] = std::min(hi[i], o.hi[i]);
  }
  return r;
}

Box Box::pad(double rad) const {
  Box r = *this;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(r.lo[i])) r.lo[i] -= rad;
    if (std::isfinite(r.hi[i])) r.hi[i] += rad;
  }
  return r;
}

Box Box::shrink(double rad) const {
  Box r = *this;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(r.lo[i])) r.lo[i] += rad;
    if (std::isfinite(r.hi[i])) r.hi[i] -= rad;
  }
  return r;
}

double Box::dist_to_point(const Pt& p) const {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = 0.0;
    if (p[i] < lo[i]) d = lo[i] - p[i];
    if (p[i] > hi[i]) d = p[i] - hi[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double Box::margin_inside(const Box& outer) const {
  double m = kInf;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(outer.lo[i])) m = std::min(m, lo[i] - outer.lo[i]);
    if (std::isfinite(outer.hi[i])) m = std::min(m, outer.hi[i] - hi[i]);
  }
  return m;
}

bool Box::bounded() const {
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(lo[i]) || !std::isfinite(hi[i])) return false;
  return true;
}

std::string Box::str() const {
  std::ostringstream os;
  os << "[";
  for (int i = 0; i < n; ++i) {
    if (i) os << "]x[";
    os << lo[i] << "," << hi[i];
  }
  os << "]";
  return os.str();
}

std::vector<Pt> grid_points(const Box& b, int per_axis) {
  std::vector<Pt> pts;
  std::array<int, kMaxDim> idx{};
  int total = 1;
  for (int i = 0; i < b.n; ++i) total *= per_axis;
  pts.reserve(total);
  for (int t = 0; t < total; ++t) {
    int rem = t;
    Pt p = pt0();
    for (int i = 0; i < b.n; ++i) {
      idx[i] = rem % per_axis;
      rem /= per_axis;
      p[i] = b.lo[i] + (idx[i] + 0.5) * (b.hi[i] - b.lo[i]) / per_axis;
    }
    pts.push_back(p);
  }
  return pts;
}

// ---------------------------------------------------------------------------
// expression nodes

class ExprNode {
 public:
  enum Kind { kNum, kVar, kAdd, kSub, kMul, kDiv, kPow, kNeg, kExp, kSin, kCos };
  Kind kind;
  double value = 0.0;  // kNum, and the exponent for kPow
  int axis = 0;
  std::shared_ptr<const ExprNode> a, b;

  explicit ExprNode(Kind k) : kind(k) {}
};

using NodeP = std::shared_ptr<const ExprNode>;

static NodeP mk_num(double v) {
  auto n = std::make_shared<ExprNode>(ExprNode::kNum);
  n->value = v;
  return n;
}

static NodeP mk_var(int axis) {
  auto n = std::make_shared<ExprNode>(ExprNode::kVar);
  n->axis = axis;
  return n;
}

static bool is_num(const NodeP& n, double v) {
  return n->kind == ExprNode::kNum && n->value == v;
}

static NodeP mk2(ExprNode::Kind k, NodeP a, NodeP b) {
  auto n = std::make_shared<ExprNode>(k);
  n->a = std::move(a);
  n->b = std::move(b);
  return n;
}

static NodeP mk1(ExprNode::Kind k, NodeP a) {
  auto n = std::make_shared<ExprNode>(k);
  n->a = std::move(a);
  return n;
}

static NodeP mk_add(const NodeP& a, const NodeP& b) {
  if (is_num(a, 0)) return b;
  if (is_num(b, 0)) return a;
  if (a->kind == ExprNode::kNum && b->kind == ExprNode::kNum)
    return mk_num(a->value + b->value);
  return mk2(ExprNode::kAdd, a, b);
}

static NodeP mk_neg(const NodeP& a) {
  if (a->kind == ExprNode::kNum) return mk_num(-a->value);
  if (a->kind == ExprNode::kNeg) return a->a;
  return mk1(ExprNode::kNeg, a);
}

static NodeP mk_sub(const NodeP& a, const NodeP& b) {
  if (is_num(b, 0)) return a;
  if (is_num(a, 0)) return mk_neg(b);
  if (a->kind == ExprNode::kNum && b->kind == ExprNode::kNum)
    return mk_num(a->value - b->value);
  return mk2(ExprNode::kSub, a, b);
}

static NodeP mk_mul(const NodeP& a, const NodeP& b) {
  if (is_num(a, 0) || is_num(b, 0)) return mk_num(0);
  if (is_num(a, 1)) return b;
  if (is_num(b, 1)) return a;
  if (a->kind == ExprNode::kNum && b->kind == ExprNode::kNum)
    return mk_num(a->value * b->value);
  return mk2(ExprNode::kMul, a, b);
}

static NodeP mk_div(const NodeP& a, const NodeP& b) {
  if (is_num(a, 0)) return mk_num(0);
  if (is_num(b, 1)) return a;
  if (a->kind == ExprNode::kNum && b->kind == ExprNode::kNum && b->value != 0)
    return mk_num(a->value / b->value);
  return mk2(ExprNode::kDiv, a, b);
}

static NodeP mk_pow(const NodeP& a, double expo) {
  if (expo == 0.0) return mk_num(1);
  if (expo == 1.0) return a;
  if (a->kind == ExprNode::kNum) return mk_num(std::pow(a->value, expo));
  auto n = mk1(ExprNode::kPow, a);
  const_cast<ExprNode*>(n.get())->value = expo;
  return n;
}

static double eval_node(const ExprNode* n, const double* x) {
  switch (n->kind) {
    case ExprNode::kNum: return n->value;
    case ExprNode::kVar: return x[n->axis];
    case ExprNode::kAdd: return eval_node(n->a.get(), x) + eval_node(n->b.get(), x);
    case ExprNode::kSub: return eval_node(n->a.get(), x) - eval_node(n->b.get(), x);
    case ExprNode::kMul: return eval_node(n->a.get(), x) * eval_node(n->b.get(), x);
    case ExprNode::kDiv: return eval_node(n->a.get(), x) / eval_node(n->b.get(), x);
    case ExprNode::kPow: return std::pow(eval_node(n->a.get(), x), n->value);
    case ExprNode::kNeg: return -eval_node(n->a.get(), x);
    case ExprNode::kExp: return std::exp(eval_node(n->a.get(), x));
    case ExprNode::kSin: return std::sin(eval_node(n->a.get(), x));
    case ExprNode::kCos: return std::cos(eval_node(n->a.get(), x));
  }
  return 0.0;
}

static NodeP diff_node(const NodeP& n, int axis) {
  switch (n->kind) {
    case ExprNode::kNum: return mk_num(0);
    case ExprNode::kVar: return mk_num(n->axis == axis ? 1 : 0);
    case ExprNode::kAdd: return mk_add(diff_node(n->a, axis), diff_node(n->b, axis));
    case ExprNode::kSub: return mk_sub(diff_node(n->a, axis), diff_node(n->b, axis));
    case ExprNode::kMul:
      return mk_add(mk_mul(diff_node(n->a, axis), n->b),
                    mk_mul(n->a, diff_node(n->b, axis)));
    case ExprNode::kDiv:
      return mk_div(mk_sub(mk_mul(diff_node(n->a, axis), n->b),
                           mk_mul(n->a, diff_node(n->b, axis))),
                    mk_pow(n->b, 2));
    case ExprNode::kPow:
      return mk_mul(mk_mul(mk_num(n->value), mk_pow(n->a, n->value - 1)),
                    diff_node(n->a, axis));
    case ExprNode::kNeg: return mk_neg(diff_node(n->a, axis));
    case ExprNode::kExp: return mk_mul(mk1(ExprNode::kExp, n->a), diff_node(n->a, axis));
    case ExprNode::kSin: return mk_mul(mk1(ExprNode::kCos, n->a), diff_node(n->a, axis));
    case ExprNode::kCos:
      return mk_neg(mk_mul(mk1(ExprNode::kSin, n->a), diff_node(n->a, axis)));
  }
  return mk_num(0);
}

static int max_var_node(const ExprNode* n) {
  switch (n->kind) {
    case ExprNode::kNum: return -1;
    case ExprNode::kVar: return n->axis;
    default: {
      int m = -1;
      if (n->a) m = std::max(m, max_var_node(n->a.get()));
      if (n->b) m = std::max(m, max_var_node(n->b.get()));
      return m;
    }
  }
}

static int prec(const ExprNode* n) {
  switch (n->kind) {
    case ExprNode::kAdd:
    case ExprNode::kSub: return 1;
    case ExprNode::kMul:
    case ExprNode::kDiv: return 2;
    case ExprNode::kNeg: return 2;
    case ExprNode::kPow: return 3;
    default: return 4;
  }
}

static void print_node(const ExprNode* n, std::ostream& os, int parent_prec) {
  bool paren = prec(n) < parent_prec;
  if (paren) os << "(";
  switch (n->kind) {
    case ExprNode::kNum: {
      if (n->value < 0) {
        os << "(" << n->value << ")";
      } else {
        os << n->value;
      }
      break;
    }
    case ExprNode::kVar: os << "x" << n->axis; break;
    case ExprNode::kAdd:
      print_node(n->a.get(), os, 1);
      os << " + ";
      print_node(n->b.get(), os, 2);
      break;
    case ExprNode::kSub:
      print_node(n->a.get(), os, 1);
      os << " - ";
      print_node(n->b.get(), os, 2);
      break;
    case ExprNode::kMul:
      print_node(n->a.get(), os, 2);
      os << "*";
      print_node(n->b.get(), os, 3);
      break;
    case ExprNode::kDiv:
      print_node(n->a.get(), os, 2);
      os << "/";
      print_node(n->b.get(), os, 3);
      break;
    case ExprNode::kPow:
      print_node(n->a.get(), os, 4);
      os << "^" << n->value;
      break;
    case ExprNode::kNeg:
      os << "-";
      print_node(n->a.get(), os, 3);
      break;
    case ExprNode::kExp:
      os << "exp(";
      print_node(n->a.get(), os, 0);
      os << ")";
      break;
    case ExprNode::kSin:
      os << "sin(";
      print_node(n->a.get(), os, 0);
      os << ")";
      break;
    case ExprNode::kCos:
      os << "cos(";
      print_node(n->a.get(), os, 0);
      os << ")";
      break;
  }
  if (paren) os << ")";
}

Expr::Expr() : node(mk_num(0)) {}
Expr::Expr(double c) : node(mk_num(c)) {}
Expr Expr::num(double c) { return Expr(mk_num(c)); }
Expr Expr::var(int axis) { return Expr(mk_var(axis)); }

double Expr::eval(const double* x) const { return eval_node(node.get(), x); }
Expr Expr::diff(int axis) const { return Expr(diff_node(node, axis)); }

Expr Expr::diff(const MIdx& a) const {
  Expr e = *this;
  for (int ax = 0; ax < kMaxDim; ++ax)
    for (int k = 0; k < a[ax]; ++k) e = e.diff(ax);
  return e;
}

bool Expr::is_zero() const { return is_num(node, 0); }

bool Expr::is_const(double* out) const {
  if (node->kind != ExprNode::kNum) return false;
  if (out) *out = node->value;
  return true;
}

int Expr::max_var() const { return max_var_node(node.get()); }

std::string Expr::str() const {
  std::ostringstream os;
  print_node(node.get(), os, 0);
  return os.str();
}

Expr operator+(const Expr& a, const Expr& b) { return Expr(mk_add(a.node, b.node)); }
Expr operator-(const Expr& a, const Expr& b) { return Expr(mk_sub(a.node, b.node)); }
Expr operator*(const Expr& a, const Expr& b) { return Expr(mk_mul(a.node, b.node)); }
Expr operator/(const Expr& a, const Expr& b) { return Expr(mk_div(a.node, b.node)); }
Expr operator-(const Expr& a) { return Expr(mk_neg(a.node)); }

Expr pow(const Expr& base, const Expr& exponent) {
  double c;
  if (!exponent.is_const(&c))
    throw ConfigError("exponent must be a constant expression");
  return Expr(mk_pow(base.node, c));
}
Expr pow(const Expr& base, int exponent) {
  return Expr(mk_pow(base.node, double(exponent)));
}
Expr exp(const Expr& a) {
  if (a.node->kind == ExprNode::kNum) return Expr(std::exp(a.node->value));
  return Expr(mk1(ExprNode::kExp, a.node));
}
Expr sin(const Expr& a) {
  if (a.node->kind == ExprNode::kNum) return Expr(std::sin(a.node->value));
  return Expr(mk1(ExprNode::kSin, a.node));
}
Expr cos(const Expr& a) {
  if (a.node->kind == ExprNode::kNum) return Expr(std::cos(a.node->value));
  return Expr(mk1(ExprNode::kCos, a.node));
}

// ---------------------------------------------------------------------------
// parser

namespace {

struct Lexer {
  const std::string& s;
  size_t pos = 0;
  int line = 1, col = 1;

  explicit Lexer(const std::string& text) : s(text) {}

  void skip_ws() {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\n')) {
      if (s[pos] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
      ++pos;
    }
  }

  char peek() {
    skip_ws();
    return pos < s.size() ? s[pos] : '\0';
  }

  void adv(size_t k = 1) {
    for (size_t i = 0; i < k && pos < s.size(); ++i) {
      ++col;
      ++pos;
    }
  }

  [[noreturn]] void fail(const std::string& msg) {
    throw ConfigError("expression error: " + msg, line, col);
  }
};

struct Parser {
  Lexer lx;
  explicit Parser(const std::string& t) : lx(t) {}

  Expr parse() {
    Expr e = expr();
    if (lx.peek() != '\0') lx.fail("unexpected trailing input");
    return e;
  }

  Expr expr() {
    Expr e = term();
    for (;;) {
      char c = lx.peek();
      if (c == '+') {
        lx.adv();
        e = e + term();
      } else if (c == '-') {
        lx.adv();
        e = e - term();
      } else {
        return e;
      }
    }
  }

  Expr term() {
    Expr e = factor();
    for (;;) {
      char c = lx.peek();
      if (c == '*') {
        lx.adv();
        e = e * factor();
      } else if (c == '/') {
        lx.adv();
        e = e / factor();
      } else {
        return e;
      }
    }
  }

  Expr factor() {
    char c = lx.peek();
    if (c == '-') {
      lx.adv();
      return -factor();
    }
    return power();
  }

  Expr power() {
    Expr base = atom();
    if (lx.peek() == '^') {
      lx.adv();
      Expr e = factor();  // right-assoc; also admits -2 etc.
      double c;
      if (!e.is_const(&c)) lx.fail("exponent must be constant");
      return Expr(mk_pow(base.node, c));
    }
    return base;
  }

  Expr atom() {
    char c = lx.peek();
    if (c == '(') {
      lx.adv();
      Expr e = expr();
      if (lx.peek() != ')') lx.fail("expected ')'");
      lx.adv();
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return ident();
    lx.fail(std::string("unexpected character '") + c + "'");
  }

  Expr number() {
    lx.skip_ws();
    const char* start = lx.s.c_str() + lx.pos;
    char* end = nullptr;
    double v = std::strtod(start, &end);
    if (end == start) lx.fail("bad number");
    lx.adv(size_t(end - start));
    return Expr(v);
  }

  Expr ident() {
    lx.skip_ws();
    size_t start = lx.pos;
    while (lx.pos < lx.s.size() &&
           (std::isalnum(static_cast<unsigned char>(lx.s[lx.pos])) || lx.s[lx.pos] == '_'))
      lx.adv();
    std::string name = lx.s.substr(start, lx.pos - start);
    if (name == "pi") return Expr(3.14159265358979323846);
    if (name == "x" || name == "x0") return Expr::var(0);
    if (name == "y" || name == "x1") return Expr::var(1);
    if (name == "z" || name == "x2") return Expr::var(2);
    if (name == "exp" || name == "sin" || name == "cos") {
      if (lx.peek() != '(') lx.fail("expected '(' after " + name);
      lx.adv();
      Expr arg = expr();
      if (lx.peek() != ')') lx.fail("expected ')'");
      lx.adv();
      if (name == "exp") return exp(arg);
      if (name == "sin") return sin(arg);
      return cos(arg);
    }
    lx.fail("unknown identifier '" + name + "'");
  }
};

}  // namespace

Expr parse_expr(const std::string& text) { return Parser(text).parse(); }

static NodeP subst_node(const NodeP& n, const std::vector<Expr>& repl) {
  switch (n->kind) {
    case ExprNode::kNum: return n;
    case ExprNode::kVar:
      if (n->axis < int(repl.size())) return repl[n->axis].node;
      return n;
    case ExprNode::kPow: {
      auto r = mk_pow(subst_node(n->a, repl), n->value);
      return r;
    }
    default: {
      auto m = std::make_shared<ExprNode>(n->kind);
      m->value = n->value;
      m->axis = n->axis;
      if (n->a) m->a = subst_node(n->a, repl);
      if (n->b) m->b = subst_node(n->b, repl);
      return m;
    }
  }
}

Expr substitute_affine(const Expr& e, const std::vector<std::vector<double>>& A,
                       const std::vector<double>& b) {
  std::vector<Expr> repl;
  for (size_t i = 0; i < A.size(); ++i) {
    Expr r(b[i]);
    for (size_t j = 0; j < A[i].size(); ++j)
      r = r + Expr(A[i][j]) * Expr::var(int(j));
    repl.push_back(r);
  }
  return Expr(subst_node(e.node, repl));
}

}  // namespace gensec
