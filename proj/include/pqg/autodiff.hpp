#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Graph is a tape: every operation appends a node holding its forward value
// and a closure that propagates the node's gradient to its inputs. Nodes are
// visited in reverse creation order by Graph::backward, which is a valid
// topological order because inputs are always created before their users.
//
// Everything is templated on the scalar type so that finite-difference
// gradient checks can run in extended precision.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pqg {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

// A trainable tensor plus its gradient accumulator. Rows can be frozen, which
// is how embedding rows outside the finetune set are kept fixed: a frozen row
// never accumulates gradient, so no optimizer can move it.
template <typename T>
class Parameter {
 public:
  Parameter(std::string name, Matrix<T> value)
      : name_(std::move(name)), value_(std::move(value)),
        grad_(Matrix<T>::Zero(value_.rows(), value_.cols())) {}

  const std::string& name() const { return name_; }
  Matrix<T>& value() { return value_; }
  const Matrix<T>& value() const { return value_; }
  const Matrix<T>& grad() const { return grad_; }
  Matrix<T>& grad() { return grad_; }
  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }

  void set_row_mask(std::vector<bool> trainable) {
    if (static_cast<Index>(trainable.size()) != value_.rows()) {
      throw std::invalid_argument("row mask size mismatch for " + name_);
    }
    row_mask_ = std::move(trainable);
  }
  void clear_row_mask() { row_mask_.clear(); }
  bool row_trainable(Index r) const {
    return row_mask_.empty() || row_mask_[static_cast<std::size_t>(r)];
  }
  const std::vector<bool>& row_mask() const { return row_mask_; }

  void accumulate(const Matrix<T>& g) {
    if (row_mask_.empty()) {
      grad_ += g;
      return;
    }
    for (Index r = 0; r < g.rows(); ++r) {
      if (row_mask_[static_cast<std::size_t>(r)]) grad_.row(r) += g.row(r);
    }
  }
  template <typename Derived>
  void accumulate_row(Index r, const Eigen::MatrixBase<Derived>& g) {
    if (row_trainable(r)) grad_.row(r) += g.transpose();
  }
  void zero_grad() { grad_.setZero(); }

 private:
  std::string name_;
  Matrix<T> value_;
  Matrix<T> grad_;
  std::vector<bool> row_mask_;
};

template <typename T>
class Graph;

// Handle to a node in a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
struct Expr {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return graph->value(*this); }
  T scalar() const { return graph->value(*this)(0, 0); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, int)>;

  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Backward backward;
    bool needs_grad = false;
    bool has_grad = false;
  };

  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // While a NoGrad guard is alive, new nodes never carry gradient even when
  // their inputs do. Used for the greedy baseline decode.
  class NoGrad {
   public:
    explicit NoGrad(Graph& g) : g_(g), saved_(g.track_) { g_.track_ = false; }
    ~NoGrad() { g_.track_ = saved_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Graph& g_;
    bool saved_;
  };

  bool tracking() const { return track_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix<T>& value(Expr<T> e) const { return nodes_[check(e)].value; }
  const Matrix<T>& grad(Expr<T> e) const { return nodes_[check(e)].grad; }
  bool has_grad(Expr<T> e) const { return nodes_[check(e)].has_grad; }
  bool needs_grad(Expr<T> e) const { return nodes_[check(e)].needs_grad; }

  Expr<T> constant(Matrix<T> v) { return push(std::move(v), false, nullptr); }
  Expr<T> scalar(T v) {
    Matrix<T> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Whole-parameter node; cached so each parameter is copied once per graph.
  Expr<T> param(Parameter<T>& p) {
    const bool tracked = track_;
    auto key = std::make_pair(&p, tracked);
    auto it = param_cache_.find(key);
    if (it != param_cache_.end()) return Expr<T>{this, it->second};
    Backward bw = nullptr;
    if (tracked) {
      Parameter<T>* pp = &p;
      bw = [pp](Graph& g, int self) { pp->accumulate(g.nodes_[self].grad); };
    }
    Expr<T> e = push(p.value(), tracked, std::move(bw));
    param_cache_.emplace(key, e.id);
    return e;
  }

  // Row `row` of `p` as a column vector, with sparse gradient accumulation.
  Expr<T> lookup(Parameter<T>& p, Index row) {
    if (row < 0 || row >= p.rows()) throw std::out_of_range("lookup row out of range in " + p.name());
    Matrix<T> v = p.value().row(row).transpose();
    Backward bw = nullptr;
    if (track_) {
      Parameter<T>* pp = &p;
      bw = [pp, row](Graph& g, int self) { pp->accumulate_row(row, g.nodes_[self].grad.col(0)); };
    }
    return push(std::move(v), track_, std::move(bw));
  }

  // Generic node construction used by the operation library below.
  Expr<T> make(Matrix<T> v, std::initializer_list<Expr<T>> inputs, Backward bw) {
    bool ng = false;
    if (track_) {
      for (const auto& in : inputs) ng = ng || nodes_[check(in)].needs_grad;
    }
    return push(std::move(v), ng, ng ? std::move(bw) : nullptr);
  }
  Expr<T> make(Matrix<T> v, const std::vector<Expr<T>>& inputs, Backward bw) {
    bool ng = false;
    if (track_) {
      for (const auto& in : inputs) ng = ng || nodes_[check(in)].needs_grad;
    }
    return push(std::move(v), ng, ng ? std::move(bw) : nullptr);
  }

  // Adds `g` to the gradient of `e` (no-op for nodes that do not need one).
  template <typename Derived>
  void accumulate(Expr<T> e, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[check(e)];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }
  const Matrix<T>& out_grad(int self) const { return nodes_[self].grad; }
  const Matrix<T>& node_value(int id) const { return nodes_[id].value; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every parameter reachable
  // through tracked nodes. `loss` must be 1x1.
  void backward(Expr<T> loss) {
    Node& root = nodes_[check(loss)];
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw std::invalid_argument("backward() requires a scalar loss");
    }
    if (!root.needs_grad) return;
    root.grad = Matrix<T>::Ones(1, 1);
    root.has_grad = true;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  int check(Expr<T> e) const {
    if (e.graph != this || e.id < 0 || e.id >= static_cast<int>(nodes_.size())) {
      throw std::logic_error("expression does not belong to this graph");
    }
    return e.id;
  }
  Expr<T> push(Matrix<T> v, bool needs_grad, Backward bw) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Expr<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  struct PairHash {
    std::size_t operator()(const std::pair<Parameter<T>*, bool>& k) const {
      return std::hash<const void*>()(k.first) ^ static_cast<std::size_t>(k.second);
    }
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::pair<Parameter<T>*, bool>, int, PairHash> param_cache_;
  bool track_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes follow Eigen conventions; sequences are column vectors
// or matrices whose columns are time steps.

namespace ops_detail {
template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}
}  // namespace ops_detail

template <typename T>
Expr<T> matmul(Expr<T> a, Expr<T> b) {
  Graph<T>& g = *a.graph;
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix<T> v = a.value() * b.value();
  return g.make(std::move(v), {a, b}, [a, b](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    if (g.needs_grad(a)) g.accumulate(a, go * b.value().transpose());
    if (g.needs_grad(b)) g.accumulate(b, a.value().transpose() * go);
  });
}

template <typename T>
Expr<T> operator+(Expr<T> a, Expr<T> b) {
  ops_detail::require_same_shape(a.value(), b.value(), "add");
  Matrix<T> v = a.value() + b.value();
  return a.graph->make(std::move(v), {a, b}, [a, b](Graph<T>& g, int self) {
    g.accumulate(a, g.out_grad(self));
    g.accumulate(b, g.out_grad(self));
  });
}

template <typename T>
Expr<T> operator-(Expr<T> a, Expr<T> b) {
  ops_detail::require_same_shape(a.value(), b.value(), "sub");
  Matrix<T> v = a.value() - b.value();
  return a.graph->make(std::move(v), {a, b}, [a, b](Graph<T>& g, int self) {
    g.accumulate(a, g.out_grad(self));
    g.accumulate(b, -g.out_grad(self));
  });
}

template <typename T>
Expr<T> operator*(T s, Expr<T> a) {
  Matrix<T> v = s * a.value();
  return a.graph->make(std::move(v), {a}, [a, s](Graph<T>& g, int self) {
    g.accumulate(a, s * g.out_grad(self));
  });
}

// Elementwise product.
template <typename T>
Expr<T> cmul(Expr<T> a, Expr<T> b) {
  ops_detail::require_same_shape(a.value(), b.value(), "cmul");
  Matrix<T> v = a.value().cwiseProduct(b.value());
  return a.graph->make(std::move(v), {a, b}, [a, b](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    if (g.needs_grad(a)) g.accumulate(a, go.cwiseProduct(b.value()));
    if (g.needs_grad(b)) g.accumulate(b, go.cwiseProduct(a.value()));
  });
}

// Scalar expression (1x1) times a matrix expression.
template <typename T>
Expr<T> scale_by(Expr<T> s, Expr<T> a) {
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scale must be 1x1");
  const T sv = s.scalar();
  Matrix<T> v = sv * a.value();
  return a.graph->make(std::move(v), {s, a}, [s, a](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    if (g.needs_grad(s)) {
      Matrix<T> gs(1, 1);
      gs(0, 0) = go.cwiseProduct(a.value()).sum();
      g.accumulate(s, gs);
    }
    if (g.needs_grad(a)) g.accumulate(a, s.scalar() * go);
  });
}

template <typename T>
Expr<T> tanh(Expr<T> a) {
  Matrix<T> v = a.value().array().tanh().matrix();
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    const Matrix<T>& y = g.node_value(self);
    g.accumulate(a, g.out_grad(self).cwiseProduct((T(1) - y.array().square()).matrix()));
  });
}

template <typename T>
Expr<T> sigmoid(Expr<T> a) {
  Matrix<T> v = a.value().unaryExpr([](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    const Matrix<T>& y = g.node_value(self);
    g.accumulate(a, g.out_grad(self).cwiseProduct((y.array() * (T(1) - y.array())).matrix()));
  });
}

template <typename T>
Expr<T> relu(Expr<T> a) {
  Matrix<T> v = a.value().cwiseMax(T(0));
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    Matrix<T> mask = a.value().unaryExpr([](T x) { return x > T(0) ? T(1) : T(0); });
    g.accumulate(a, g.out_grad(self).cwiseProduct(mask));
  });
}

template <typename T>
Expr<T> transpose(Expr<T> a) {
  Matrix<T> v = a.value().transpose();
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    g.accumulate(a, g.out_grad(self).transpose());
  });
}

// Stacks inputs vertically; all inputs must have the same column count.
template <typename T>
Expr<T> concat_rows(const std::vector<Expr<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  const Index cols = xs.front().cols();
  Index rows = 0;
  for (const auto& x : xs) {
    if (x.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += x.rows();
  }
  Matrix<T> v(rows, cols);
  Index r = 0;
  for (const auto& x : xs) {
    v.middleRows(r, x.rows()) = x.value();
    r += x.rows();
  }
  return xs.front().graph->make(std::move(v), xs, [xs](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    Index r = 0;
    for (const auto& x : xs) {
      if (g.needs_grad(x)) g.accumulate(x, go.middleRows(r, x.rows()));
      r += x.rows();
    }
  });
}

// Places inputs side by side; all inputs must have the same row count.
template <typename T>
Expr<T> concat_cols(const std::vector<Expr<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  const Index rows = xs.front().rows();
  Index cols = 0;
  for (const auto& x : xs) {
    if (x.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += x.cols();
  }
  Matrix<T> v(rows, cols);
  Index c = 0;
  for (const auto& x : xs) {
    v.middleCols(c, x.cols()) = x.value();
    c += x.cols();
  }
  return xs.front().graph->make(std::move(v), xs, [xs](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    Index c = 0;
    for (const auto& x : xs) {
      if (g.needs_grad(x)) g.accumulate(x, go.middleCols(c, x.cols()));
      c += x.cols();
    }
  });
}

template <typename T>
Expr<T> rows(Expr<T> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("rows: slice out of range");
  Matrix<T> v = a.value().middleRows(start, count);
  return a.graph->make(std::move(v), {a}, [a, start, count](Graph<T>& g, int self) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g.out_grad(self);
    g.accumulate(a, full);
  });
}

template <typename T>
Expr<T> col(Expr<T> a, Index j) {
  if (j < 0 || j >= a.cols()) throw std::out_of_range("col: index out of range");
  Matrix<T> v = a.value().col(j);
  return a.graph->make(std::move(v), {a}, [a, j](Graph<T>& g, int self) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    full.col(j) = g.out_grad(self).col(0);
    g.accumulate(a, full);
  });
}

// M (d x n) plus column vector v (d x 1) added to every column.
template <typename T>
Expr<T> add_col_broadcast(Expr<T> m, Expr<T> v) {
  if (v.cols() != 1 || v.rows() != m.rows()) throw std::invalid_argument("add_col_broadcast: shape mismatch");
  Matrix<T> out = m.value().colwise() + v.value().col(0);
  return m.graph->make(std::move(out), {m, v}, [m, v](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    g.accumulate(m, go);
    if (g.needs_grad(v)) g.accumulate(v, go.rowwise().sum());
  });
}

// M (d x n) plus row vector r (1 x n) added to every row.
template <typename T>
Expr<T> add_row_broadcast(Expr<T> m, Expr<T> r) {
  if (r.rows() != 1 || r.cols() != m.cols()) throw std::invalid_argument("add_row_broadcast: shape mismatch");
  Matrix<T> out = m.value().rowwise() + r.value().row(0);
  return m.graph->make(std::move(out), {m, r}, [m, r](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    g.accumulate(m, go);
    if (g.needs_grad(r)) g.accumulate(r, go.colwise().sum());
  });
}

// Every column of M (d x n) multiplied elementwise by v (d x 1).
template <typename T>
Expr<T> cmul_col_broadcast(Expr<T> m, Expr<T> v) {
  if (v.cols() != 1 || v.rows() != m.rows()) throw std::invalid_argument("cmul_col_broadcast: shape mismatch");
  Matrix<T> out = m.value().array().colwise() * v.value().col(0).array();
  return m.graph->make(std::move(out), {m, v}, [m, v](Graph<T>& g, int self) {
    const Matrix<T>& go = g.out_grad(self);
    if (g.needs_grad(m)) {
      g.accumulate(m, (go.array().colwise() * v.value().col(0).array()).matrix());
    }
    if (g.needs_grad(v)) g.accumulate(v, go.cwiseProduct(m.value()).rowwise().sum());
  });
}

// Softmax applied independently to each column.
template <typename T>
Expr<T> softmax_cols(Expr<T> a) {
  const Matrix<T>& x = a.value();
  Matrix<T> v(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const T mx = x.col(j).maxCoeff();
    v.col(j) = (x.col(j).array() - mx).exp().matrix();
    v.col(j) /= v.col(j).sum();
  }
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    const Matrix<T>& y = g.node_value(self);
    const Matrix<T>& go = g.out_grad(self);
    Matrix<T> gi(y.rows(), y.cols());
    for (Index j = 0; j < y.cols(); ++j) {
      const T dot = go.col(j).dot(y.col(j));
      gi.col(j) = y.col(j).cwiseProduct((go.col(j).array() - dot).matrix());
    }
    g.accumulate(a, gi);
  });
}

// Log-softmax of a column vector.
template <typename T>
Expr<T> log_softmax(Expr<T> a) {
  if (a.cols() != 1) throw std::invalid_argument("log_softmax: expects a column vector");
  const Matrix<T>& x = a.value();
  const T mx = x.maxCoeff();
  const T lse = mx + std::log((x.array() - mx).exp().sum());
  Matrix<T> v = (x.array() - lse).matrix();
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    const Matrix<T>& y = g.node_value(self);
    const Matrix<T>& go = g.out_grad(self);
    const T total = go.sum();
    g.accumulate(a, (go.array() - y.array().exp() * total).matrix());
  });
}

// -log softmax(a)[i] for a column vector `a`, fused for stability and speed.
template <typename T>
Expr<T> neg_log_softmax_pick(Expr<T> a, Index i) {
  if (a.cols() != 1) throw std::invalid_argument("neg_log_softmax_pick: expects a column vector");
  if (i < 0 || i >= a.rows()) throw std::out_of_range("neg_log_softmax_pick: index out of range");
  const Matrix<T>& x = a.value();
  const T mx = x.maxCoeff();
  const T lse = mx + std::log((x.array() - mx).exp().sum());
  Matrix<T> v(1, 1);
  v(0, 0) = lse - x(i, 0);
  return a.graph->make(std::move(v), {a}, [a, i, lse](Graph<T>& g, int self) {
    Matrix<T> p = (a.value().array() - lse).exp().matrix();
    p(i, 0) -= T(1);
    g.accumulate(a, g.out_grad(self)(0, 0) * p);
  });
}

// Element (i, 0) of a column vector as a 1x1 expression.
template <typename T>
Expr<T> pick(Expr<T> a, Index i) {
  if (i < 0 || i >= a.rows()) throw std::out_of_range("pick: index out of range");
  Matrix<T> v(1, 1);
  v(0, 0) = a.value()(i, 0);
  return a.graph->make(std::move(v), {a}, [a, i](Graph<T>& g, int self) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    full(i, 0) = g.out_grad(self)(0, 0);
    g.accumulate(a, full);
  });
}

// Row-wise maximum over columns: max-pooling over time for a d x n sequence.
template <typename T>
Expr<T> max_over_cols(Expr<T> a) {
  const Matrix<T>& x = a.value();
  Matrix<T> v(x.rows(), 1);
  std::vector<Index> arg(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < x.cols(); ++c) {
      if (x(r, c) > x(r, best)) best = c;
    }
    arg[static_cast<std::size_t>(r)] = best;
    v(r, 0) = x(r, best);
  }
  return a.graph->make(std::move(v), {a}, [a, arg](Graph<T>& g, int self) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    const Matrix<T>& go = g.out_grad(self);
    for (Index r = 0; r < full.rows(); ++r) full(r, arg[static_cast<std::size_t>(r)]) = go(r, 0);
    g.accumulate(a, full);
  });
}

// Column-wise maximum over rows, returned as a column vector (one entry per
// column of `a`).
template <typename T>
Expr<T> max_over_rows(Expr<T> a) {
  return max_over_cols(transpose(a));
}

template <typename T>
Expr<T> sum_all(Expr<T> a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return a.graph->make(std::move(v), {a}, [a](Graph<T>& g, int self) {
    g.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g.out_grad(self)(0, 0)));
  });
}

// Sum of same-shaped expressions, accumulated left to right.
template <typename T>
Expr<T> sum(const std::vector<Expr<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("sum: empty input");
  Matrix<T> v = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    ops_detail::require_same_shape(v, xs[i].value(), "sum");
    v += xs[i].value();
  }
  return xs.front().graph->make(std::move(v), xs, [xs](Graph<T>& g, int self) {
    for (const auto& x : xs) g.accumulate(x, g.out_grad(self));
  });
}

// Numerically stable binary cross-entropy on a 1x1 logit:
// softplus(s) - y * s.
template <typename T>
Expr<T> bce_with_logit(Expr<T> logit, T label) {
  if (logit.rows() != 1 || logit.cols() != 1) throw std::invalid_argument("bce_with_logit: expects 1x1");
  const T s = logit.scalar();
  const T softplus = s > T(0) ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  Matrix<T> v(1, 1);
  v(0, 0) = softplus - label * s;
  return logit.graph->make(std::move(v), {logit}, [logit, label](Graph<T>& g, int self) {
    const T s = logit.scalar();
    const T p = s >= T(0) ? T(1) / (T(1) + std::exp(-s)) : std::exp(s) / (T(1) + std::exp(s));
    Matrix<T> gi(1, 1);
    gi(0, 0) = g.out_grad(self)(0, 0) * (p - label);
    g.accumulate(logit, gi);
  });
}

// Inverted dropout with keep-probability 1 - rate. Identity when rate == 0.
template <typename T, typename Rng>
Expr<T> dropout(Expr<T> a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = T(1) / T(1.0 - rate);
  Matrix<T> mask(a.rows(), a.cols());
  for (Index j = 0; j < mask.cols(); ++j) {
    for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = keep(rng) ? scale : T(0);
  }
  Expr<T> m = a.graph->constant(std::move(mask));
  return cmul(a, m);
}

}  // namespace pqg
