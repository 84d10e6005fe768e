#pragma once

// Recurrent cells, sequence encoders and attention blocks shared by the
// question generator, the answerer and the specificity classifier. Layers
// own no storage; they hold pointers into a ParameterStore.

#include "pqg/autodiff.hpp"
#include "pqg/params.hpp"

#include <string>
#include <utility>
#include <vector>

namespace pqg {

template <typename T>
using Seq = std::vector<Expr<T>>;

template <typename T>
class Linear {
 public:
  Linear() = default;
  template <typename Rng>
  Linear(ParameterStore<T>& store, const std::string& name, Index in, Index out, Rng& rng, bool bias = true) {
    w_ = &store.add_glorot(name + ".w", out, in, rng);
    if (bias) b_ = &store.add_zeros(name + ".b", out, 1);
  }
  Expr<T> operator()(Graph<T>& g, Expr<T> x) const {
    Expr<T> y = matmul(g.param(*w_), x);
    if (!b_) return y;
    if (x.cols() == 1) return y + g.param(*b_);
    return add_col_broadcast(y, g.param(*b_));
  }
  Index out_dim() const { return w_->rows(); }
  Index in_dim() const { return w_->cols(); }

 private:
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

template <typename T>
struct LstmState {
  Expr<T> h;
  Expr<T> c;
};

// Standard LSTM cell; gate order input, forget, output, candidate.
template <typename T>
class LstmCell {
 public:
  LstmCell() = default;
  template <typename Rng>
  LstmCell(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, Rng& rng) : hidden_(hidden) {
    wx_ = &store.add_glorot(name + ".wx", 4 * hidden, in, rng);
    wh_ = &store.add_glorot(name + ".wh", 4 * hidden, hidden, rng);
    Matrix<T> b = Matrix<T>::Zero(4 * hidden, 1);
    b.middleRows(hidden, hidden).setOnes();
    b_ = &store.add(name + ".b", std::move(b));
  }

  Index hidden() const { return hidden_; }

  LstmState<T> zero_state(Graph<T>& g) const {
    return {g.constant(Matrix<T>::Zero(hidden_, 1)), g.constant(Matrix<T>::Zero(hidden_, 1))};
  }

  LstmState<T> step(Graph<T>& g, Expr<T> x, const LstmState<T>& s) const {
    Expr<T> gates = matmul(g.param(*wx_), x) + matmul(g.param(*wh_), s.h) + g.param(*b_);
    Expr<T> i = sigmoid(rows(gates, 0, hidden_));
    Expr<T> f = sigmoid(rows(gates, hidden_, hidden_));
    Expr<T> o = sigmoid(rows(gates, 2 * hidden_, hidden_));
    Expr<T> u = tanh(rows(gates, 3 * hidden_, hidden_));
    Expr<T> c = cmul(f, s.c) + cmul(i, u);
    Expr<T> h = cmul(o, tanh(c));
    return {h, c};
  }

 private:
  Index hidden_ = 0;
  Parameter<T>* wx_ = nullptr;
  Parameter<T>* wh_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

// GRU cell with separate input and recurrent biases (reset applied after the
// recurrent matmul).
template <typename T>
class GruCell {
 public:
  GruCell() = default;
  template <typename Rng>
  GruCell(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, Rng& rng) : hidden_(hidden) {
    wx_ = &store.add_glorot(name + ".wx", 3 * hidden, in, rng);
    wh_ = &store.add_glorot(name + ".wh", 3 * hidden, hidden, rng);
    bx_ = &store.add_zeros(name + ".bx", 3 * hidden, 1);
    bh_ = &store.add_zeros(name + ".bh", 3 * hidden, 1);
  }

  Index hidden() const { return hidden_; }

  Expr<T> zero_state(Graph<T>& g) const { return g.constant(Matrix<T>::Zero(hidden_, 1)); }

  Expr<T> step(Graph<T>& g, Expr<T> x, Expr<T> h) const {
    Expr<T> gx = matmul(g.param(*wx_), x) + g.param(*bx_);
    Expr<T> gh = matmul(g.param(*wh_), h) + g.param(*bh_);
    Expr<T> r = sigmoid(rows(gx, 0, hidden_) + rows(gh, 0, hidden_));
    Expr<T> z = sigmoid(rows(gx, hidden_, hidden_) + rows(gh, hidden_, hidden_));
    Expr<T> n = tanh(rows(gx, 2 * hidden_, hidden_) + cmul(r, rows(gh, 2 * hidden_, hidden_)));
    // h' = n + z * (h - n)
    return n + cmul(z, h - n);
  }

 private:
  Index hidden_ = 0;
  Parameter<T>* wx_ = nullptr;
  Parameter<T>* wh_ = nullptr;
  Parameter<T>* bx_ = nullptr;
  Parameter<T>* bh_ = nullptr;
};

// Output of a bidirectional pass: per-step concatenated states and the final
// state of each direction.
template <typename T>
struct BiOutput {
  Seq<T> states;      // [fwd_t; bwd_t] for each t
  Expr<T> final_fwd;  // after the last token
  Expr<T> final_bwd;  // after the first token (backward direction)
  Expr<T> final_concat() const { return concat_rows<T>({final_fwd, final_bwd}); }
};

template <typename T>
class BiLstm {
 public:
  BiLstm() = default;
  template <typename Rng>
  BiLstm(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, Rng& rng)
      : fwd_(store, name + ".fwd", in, hidden, rng), bwd_(store, name + ".bwd", in, hidden, rng) {}

  Index hidden() const { return fwd_.hidden(); }
  Index out_dim() const { return 2 * fwd_.hidden(); }

  // Optional initial hidden states (cells start at zero).
  BiOutput<T> operator()(Graph<T>& g, const Seq<T>& xs, const Expr<T>* h0_fwd = nullptr,
                         const Expr<T>* h0_bwd = nullptr) const {
    if (xs.empty()) throw std::invalid_argument("BiLstm: empty sequence");
    const std::size_t n = xs.size();
    Seq<T> f(n), b(n);
    LstmState<T> s = fwd_.zero_state(g);
    if (h0_fwd) s.h = *h0_fwd;
    for (std::size_t t = 0; t < n; ++t) {
      s = fwd_.step(g, xs[t], s);
      f[t] = s.h;
    }
    LstmState<T> r = bwd_.zero_state(g);
    if (h0_bwd) r.h = *h0_bwd;
    for (std::size_t t = n; t-- > 0;) {
      r = bwd_.step(g, xs[t], r);
      b[t] = r.h;
    }
    BiOutput<T> out;
    out.states.reserve(n);
    for (std::size_t t = 0; t < n; ++t) out.states.push_back(concat_rows<T>({f[t], b[t]}));
    out.final_fwd = f[n - 1];
    out.final_bwd = b[0];
    return out;
  }

 private:
  LstmCell<T> fwd_;
  LstmCell<T> bwd_;
};

template <typename T>
class BiGru {
 public:
  BiGru() = default;
  template <typename Rng>
  BiGru(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, Rng& rng)
      : fwd_(store, name + ".fwd", in, hidden, rng), bwd_(store, name + ".bwd", in, hidden, rng) {}

  Index out_dim() const { return 2 * fwd_.hidden(); }

  BiOutput<T> operator()(Graph<T>& g, const Seq<T>& xs) const {
    if (xs.empty()) throw std::invalid_argument("BiGru: empty sequence");
    const std::size_t n = xs.size();
    Seq<T> f(n), b(n);
    Expr<T> h = fwd_.zero_state(g);
    for (std::size_t t = 0; t < n; ++t) f[t] = h = fwd_.step(g, xs[t], h);
    Expr<T> r = bwd_.zero_state(g);
    for (std::size_t t = n; t-- > 0;) b[t] = r = bwd_.step(g, xs[t], r);
    BiOutput<T> out;
    out.states.reserve(n);
    for (std::size_t t = 0; t < n; ++t) out.states.push_back(concat_rows<T>({f[t], b[t]}));
    out.final_fwd = f[n - 1];
    out.final_bwd = b[0];
    return out;
  }

 private:
  GruCell<T> fwd_;
  GruCell<T> bwd_;
};

// Additive (MLP) attention: score_i = v . tanh(Wm m_i + Wq q). Returns the
// attention weights (n x 1) and the weighted sum of memory columns.
template <typename T>
class MlpAttention {
 public:
  MlpAttention() = default;
  template <typename Rng>
  MlpAttention(ParameterStore<T>& store, const std::string& name, Index mem_dim, Index query_dim, Index attn_dim,
               Rng& rng) {
    wm_ = &store.add_glorot(name + ".wm", attn_dim, mem_dim, rng);
    wq_ = &store.add_glorot(name + ".wq", attn_dim, query_dim, rng);
    b_ = &store.add_zeros(name + ".b", attn_dim, 1);
    v_ = &store.add_glorot(name + ".v", 1, attn_dim, rng);
  }

  // Memory projection can be computed once per memory and reused across
  // queries (the decoder attends to the same memory at every step).
  Expr<T> project_memory(Graph<T>& g, Expr<T> memory) const {
    return add_col_broadcast(matmul(g.param(*wm_), memory), g.param(*b_));
  }

  struct Result {
    Expr<T> weights;  // n x 1
    Expr<T> context;  // mem_dim x 1
  };

  Result attend(Graph<T>& g, Expr<T> memory, Expr<T> projected, Expr<T> query) const {
    Expr<T> pre = tanh(add_col_broadcast(projected, matmul(g.param(*wq_), query)));
    Expr<T> scores = transpose(matmul(g.param(*v_), pre));  // n x 1
    Expr<T> w = softmax_cols(scores);
    return {w, matmul(memory, w)};
  }

  Result operator()(Graph<T>& g, Expr<T> memory, Expr<T> query) const {
    return attend(g, memory, project_memory(g, memory), query);
  }

 private:
  Parameter<T>* wm_ = nullptr;
  Parameter<T>* wq_ = nullptr;
  Parameter<T>* b_ = nullptr;
  Parameter<T>* v_ = nullptr;
};

// Trilinear similarity used by bidirectional attention:
// S_ij = w1 . a_i + w2 . b_j + w3 . (a_i * b_j) for columns a_i of A and b_j of B.
template <typename T>
class TrilinearSimilarity {
 public:
  TrilinearSimilarity() = default;
  template <typename Rng>
  TrilinearSimilarity(ParameterStore<T>& store, const std::string& name, Index dim, Rng& rng) {
    w1_ = &store.add_glorot(name + ".w1", dim, 1, rng);
    w2_ = &store.add_glorot(name + ".w2", dim, 1, rng);
    w3_ = &store.add_glorot(name + ".w3", dim, 1, rng);
  }

  // A: d x n, B: d x m -> n x m.
  Expr<T> operator()(Graph<T>& g, Expr<T> a, Expr<T> b) const {
    Expr<T> cross = matmul(transpose(cmul_col_broadcast(a, g.param(*w3_))), b);
    Expr<T> sa = matmul(transpose(a), g.param(*w1_));  // n x 1
    Expr<T> sb = matmul(transpose(g.param(*w2_)), b);  // 1 x m
    return add_row_broadcast(add_col_broadcast(cross, sa), sb);
  }

 private:
  Parameter<T>* w1_ = nullptr;
  Parameter<T>* w2_ = nullptr;
  Parameter<T>* w3_ = nullptr;
};

// Bidirectional attention of a "context" sequence C (d x n) against a "query"
// sequence Q (d x m). Returns G = [C; C2Q; C * C2Q; C * Q2C] (4d x n).
template <typename T>
Expr<T> bidirectional_attention(Graph<T>& g, const TrilinearSimilarity<T>& sim, Expr<T> c, Expr<T> q) {
  Expr<T> s = sim(g, c, q);                           // n x m
  Expr<T> c2q_w = softmax_cols(transpose(s));         // m x n, column i over query positions
  Expr<T> c2q = matmul(q, c2q_w);                     // d x n
  Expr<T> q2c_w = softmax_cols(max_over_cols(s));       // n x 1
  Expr<T> q2c = matmul(c, q2c_w);                     // d x 1
  return concat_rows<T>({c, c2q, cmul(c, c2q), cmul_col_broadcast(c, q2c)});
}

}  // namespace pqg
