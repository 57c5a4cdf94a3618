#include "gensec/field.hpp"

#include <cmath>

namespace gensec {

namespace {

class ConstNode : public FieldNode {
 public:
  double v;
  explicit ConstNode(double c) : v(c) {}
  double eval(const double*) const override { return v; }
  Field deriv(int) const override { return Field::constant(0.0); }
};

bool is_const(const Field& f, double c) {
  auto* n = dynamic_cast<const ConstNode*>(f.node.get());
  return n && n->v == c;
}

class ExprFieldNode : public FieldNode {
 public:
  Expr e;
  explicit ExprFieldNode(Expr ex) : e(std::move(ex)) {}
  double eval(const double* x) const override { return e.eval(x); }
  Field deriv(int axis) const override {
    Expr de = e.diff(axis);
    if (de.is_zero()) return Field::constant(0.0);
    return Field::from_expr(de);
  }
};

class SumNode : public FieldNode {
 public:
  std::vector<Field> terms;
  explicit SumNode(std::vector<Field> t) : terms(std::move(t)) {}
  double eval(const double* x) const override {
    double s = 0.0;
    for (const auto& t : terms) s += t.eval(x);
    return s;
  }
  Field deriv(int axis) const override {
    std::vector<Field> d;
    d.reserve(terms.size());
    for (const auto& t : terms) d.push_back(t.d(axis));
    return Field::sum(std::move(d));
  }
};

class ProductNode : public FieldNode {
 public:
  std::vector<Field> factors;
  explicit ProductNode(std::vector<Field> f) : factors(std::move(f)) {}
  double eval(const double* x) const override {
    double p = 1.0;
    for (const auto& f : factors) p *= f.eval(x);
    return p;
  }
  Field deriv(int axis) const override {
    std::vector<Field> terms;
    for (size_t i = 0; i < factors.size(); ++i) {
      Field di = factors[i].d(axis);
      if (di.is_zero()) continue;
      std::vector<Field> fs = factors;
      fs[i] = di;
      terms.push_back(Field::product(std::move(fs)));
    }
    return Field::sum(std::move(terms));
  }
};

class ScaleNode : public FieldNode {
 public:
  double c;
  Field f;
  ScaleNode(double c_, Field f_) : c(c_), f(std::move(f_)) {}
  double eval(const double* x) const override { return c * f.eval(x); }
  Field deriv(int axis) const override { return Field::scale(c, f.d(axis)); }
};

class RecipNode : public FieldNode {
 public:
  Field f;
  explicit RecipNode(Field f_) : f(std::move(f_)) {}
  double eval(const double* x) const override { return 1.0 / f.eval(x); }
  Field deriv(int axis) const override {
    Field df = f.d(axis);
    if (df.is_zero()) return Field::constant(0.0);
    Field r = Field::recip(f);
    return Field::scale(-1.0, Field::product({df, r, r}));
  }
};

class ComposeNode : public FieldNode {
 public:
  Field inner;
  std::vector<Expr> map;
  ComposeNode(Field in, std::vector<Expr> m) : inner(std::move(in)), map(std::move(m)) {}
  double eval(const double* x) const override {
    double y[kMaxDim] = {0, 0, 0};
    for (size_t j = 0; j < map.size(); ++j) y[j] = map[j].eval(x);
    return inner.eval(y);
  }
  Field deriv(int axis) const override {
    std::vector<Field> terms;
    for (size_t j = 0; j < map.size(); ++j) {
      Expr dj = map[j].diff(axis);
      if (dj.is_zero()) continue;
      Field chain = Field::compose(inner.d(int(j)), map);
      if (chain.is_zero()) continue;
      terms.push_back(Field::product({Field::from_expr(dj), chain}));
    }
    return Field::sum(std::move(terms));
  }
};

class CutoffNode : public FieldNode {
 public:
  // (axis, cutoff, derivative order) factors
  struct Fac {
    int axis;
    Cutoff1D cut;
    int order;
  };
  std::vector<Fac> facs;
  explicit CutoffNode(std::vector<Fac> f) : facs(std::move(f)) {}
  double eval(const double* x) const override {
    double p = 1.0;
    for (const auto& f : facs) {
      double v = f.cut.eval_deriv(f.order, x[f.axis]);
      if (v == 0.0) return 0.0;
      if (v != 1.0) p *= v;
    }
    return p;
  }
  Field deriv(int axis) const override {
    std::vector<Field> terms;
    for (size_t i = 0; i < facs.size(); ++i) {
      if (facs[i].axis != axis) continue;
      auto fs = facs;
      fs[i].order += 1;
      terms.push_back(Field(std::make_shared<CutoffNode>(std::move(fs))));
    }
    return Field::sum(std::move(terms));
  }
};

}  // namespace

Field::Field() : node(std::make_shared<ConstNode>(0.0)) {}

Field Field::constant(double c) { return Field(std::make_shared<ConstNode>(c)); }

Field Field::from_expr(const Expr& e) {
  double c;
  if (e.is_const(&c)) return constant(c);
  return Field(std::make_shared<ExprFieldNode>(e));
}

bool Field::is_zero() const { return is_const(*this, 0.0); }

Field Field::sum(std::vector<Field> terms) {
  std::vector<Field> flat;
  for (auto& t : terms) {
    if (t.is_zero()) continue;
    if (auto* s = dynamic_cast<const SumNode*>(t.node.get())) {
      for (const auto& u : s->terms) flat.push_back(u);
    } else {
      flat.push_back(std::move(t));
    }
  }
  if (flat.empty()) return constant(0.0);
  if (flat.size() == 1) return flat[0];
  return Field(std::make_shared<SumNode>(std::move(flat)));
}

Field Field::product(std::vector<Field> factors) {
  std::vector<Field> flat;
  for (auto& f : factors) {
    if (f.is_zero()) return constant(0.0);
    if (is_const(f, 1.0)) continue;  // multiplying by exact 1.0 is exact
    if (auto* p = dynamic_cast<const ProductNode*>(f.node.get())) {
      for (const auto& g : p->factors) flat.push_back(g);
    } else {
      flat.push_back(std::move(f));
    }
  }
  if (flat.empty()) return constant(1.0);
  if (flat.size() == 1) return flat[0];
  return Field(std::make_shared<ProductNode>(std::move(flat)));
}

Field Field::scale(double c, const Field& f) {
  if (c == 0.0 || f.is_zero()) return constant(0.0);
  if (c == 1.0) return f;
  if (auto* k = dynamic_cast<const ConstNode*>(f.node.get()))
    return constant(c * k->v);
  if (auto* s = dynamic_cast<const ScaleNode*>(f.node.get()))
    return Field(std::make_shared<ScaleNode>(c * s->c, s->f));
  return Field(std::make_shared<ScaleNode>(c, f));
}

Field Field::recip(const Field& f) {
  if (auto* k = dynamic_cast<const ConstNode*>(f.node.get()))
    return constant(1.0 / k->v);
  return Field(std::make_shared<RecipNode>(f));
}

Field Field::compose(const Field& inner, std::vector<Expr> map) {
  if (inner.is_zero()) return constant(0.0);
  if (auto* k = dynamic_cast<const ConstNode*>(inner.node.get()))
    return constant(k->v);
  return Field(std::make_shared<ComposeNode>(inner, std::move(map)));
}

Field Field::cutoff(std::vector<std::pair<int, Cutoff1D>> axes) {
  std::vector<CutoffNode::Fac> facs;
  facs.reserve(axes.size());
  for (auto& [axis, cut] : axes) facs.push_back({axis, cut, 0});
  return Field(std::make_shared<CutoffNode>(std::move(facs)));
}

double Field::eval(const double* x) const { return node->eval(x); }

Field Field::d(int axis) const { return node->deriv(axis); }

Field Field::d(const MIdx& a) const {
  Field f = *this;
  for (int ax = 0; ax < kMaxDim; ++ax)
    for (int k = 0; k < a[ax]; ++k) f = f.d(ax);
  return f;
}

}  // namespace gensec
