#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records one forward computation. Nodes are appended in evaluation
// order, so a reverse sweep over node ids is a valid topological order.
// Parameters enter a tape as leaves; after backward() their gradients are
// accumulated into Parameter::grad (trainable parameters only).

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "egot2/errors.hpp"

namespace egot2 {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

namespace ag {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Matrix<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Matrix<S> value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf for a parameter. Repeated calls within one tape share one node.
  Var<S> param(Parameter<S>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, {}, p.trainable, &p, {}});
    int id = static_cast<int>(nodes_.size()) - 1;
    leaves_.emplace(&p, id);
    return {this, id};
  }

  // Appends an op node. `backward` is only retained when some input needs a gradient.
  template <class F>
  Var<S> push(Matrix<S> value, bool needs_grad, F&& backward) {
    Node n{std::move(value), {}, needs_grad, nullptr, {}};
    if (needs_grad) n.backward = std::forward<F>(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<S>& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  Matrix<S>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  // Seeds d(root)/d(root) = seed; root must be 1x1.
  void backward(Var<S> root, S seed = S(1)) {
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be a 1x1 scalar");
    grad(root.id)(0, 0) += seed;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        n.backward(*this, id);
      } else if (n.param != nullptr && n.param->trainable) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    bool needs_grad = false;
    Parameter<S>* param = nullptr;
    std::function<void(Tape&, int)> backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> leaves_;
};

namespace detail {

inline void require(bool ok, const char* op, const char* what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require(a.cols() == b.rows(), "matmul", "inner dimensions differ");
  Tape<S>& t = *a.tape;
  Matrix<S> v = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(v), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add", "shape mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& t, int self) {
    if (t.needs_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad(ib) += t.grad(self);
  });
}

// a (n x m) + broadcast row b (1 x m)
template <class S>
Var<S> add_row(Var<S> a, Var<S> b) {
  detail::require(b.rows() == 1 && a.cols() == b.cols(), "add_row", "bias must be 1 x cols");
  Tape<S>& t = *a.tape;
  Matrix<S> v = a.value().rowwise() + b.value().row(0);
  const int ia = a.id, ib = b.id;
  return t.push(std::move(v), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& t, int self) {
    if (t.needs_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad(ib) += t.grad(self).colwise().sum();
  });
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value() * s, t.needs_grad(ia), [ia, s](Tape<S>& t, int self) { t.grad(ia) += t.grad(self) * s; });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value().cwiseMax(S(0)), t.needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += (t.value(ia).array() > S(0)).select(t.grad(self).array(), S(0));
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> v = a.value().transpose();
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<S>& t, int self) { t.grad(ia) += t.grad(self).transpose(); });
}

// Row-major reshape; element order is preserved.
template <class S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  detail::require(rows * cols == a.value().size(), "reshape", "element count changes");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> v = Eigen::Map<const Matrix<S>>(a.value().data(), rows, cols);
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<S>& t, int self) {
    Matrix<S>& ga = t.grad(ia);
    Eigen::Map<Matrix<S>>(ga.data(), t.grad(self).rows(), t.grad(self).cols()) += t.grad(self);
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && start + n <= a.cols(), "slice_cols", "range out of bounds");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> v = a.value().middleCols(start, n);
  return t.push(std::move(v), t.needs_grad(ia),
                [ia, start, n](Tape<S>& t, int self) { t.grad(ia).middleCols(start, n) += t.grad(self); });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && start + n <= a.rows(), "slice_rows", "range out of bounds");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> v = a.value().middleRows(start, n);
  return t.push(std::move(v), t.needs_grad(ia),
                [ia, start, n](Tape<S>& t, int self) { t.grad(ia).middleRows(start, n) += t.grad(self); });
}

// Rows of `a` selected by index (repeats allowed).
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> rows) {
  Tape<S>& t = *a.tape;
  Matrix<S> v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows", "index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id;
  return t.push(std::move(v), t.needs_grad(ia), [ia, rows = std::move(rows)](Tape<S>& t, int self) {
    Matrix<S>& ga = t.grad(ia);
    const Matrix<S>& g = t.grad(self);
    for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = 0, cols = parts[0].cols();
  bool ng = false;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows", "column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix<S> v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, r);
    r += p.rows();
  }
  return t.push(std::move(v), ng, [spans = std::move(spans)](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    for (auto [id, start] : spans) {
      if (!t.needs_grad(id)) continue;
      Matrix<S>& gi = t.grad(id);
      gi += g.middleRows(start, gi.rows());
    }
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool ng = false;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols", "row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix<S> v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id, c);
    c += p.cols();
  }
  return t.push(std::move(v), ng, [spans = std::move(spans)](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    for (auto [id, start] : spans) {
      if (!t.needs_grad(id)) continue;
      Matrix<S>& gi = t.grad(id);
      gi += g.middleCols(start, gi.cols());
    }
  });
}

// Column-wise mean over rows: (n x m) -> (1 x m).
template <class S>
Var<S> mean_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const S inv = S(1) / static_cast<S>(a.rows());
  Matrix<S> v = a.value().colwise().sum() * inv;
  return t.push(std::move(v), t.needs_grad(ia), [ia, inv](Tape<S>& t, int self) {
    t.grad(ia).rowwise() += t.grad(self).row(0) * inv;
  });
}

template <class S>
Var<S> sum(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "sum", "no inputs");
  Var<S> acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

// Per-row layer normalization with learned gain (1 x m) and bias (1 x m).
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  detail::require(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm", "affine width mismatch");
  Tape<S>& t = *x.tape;
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix<S> xhat(n, m);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    const S mu = row.mean();
    const S var = (row.array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  Matrix<S> v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  const bool ng = t.needs_grad(ix) || t.needs_grad(ig) || t.needs_grad(ib);
  return t.push(std::move(v), ng, [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ig)) t.grad(ig) += (g.array() * xhat.array()).colwise().sum().matrix();
    if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    if (t.needs_grad(ix)) {
      const Eigen::Index m = g.cols();
      Matrix<S> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
      Matrix<S>& gx = t.grad(ix);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const S s1 = dxhat.row(r).sum();
        const S s2 = dxhat.row(r).dot(xhat.row(r));
        gx.row(r).array() +=
            (inv_std(r) / static_cast<S>(m)) * (static_cast<S>(m) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
      }
    }
  });
}

// Row softmax. With `causal`, entry (i, j) for j > i is masked to probability 0.
template <class S>
Var<S> softmax_rows(Var<S> a, bool causal = false) {
  Tape<S>& t = *a.tape;
  const Eigen::Index n = a.rows(), m = a.cols();
  Matrix<S> y = Matrix<S>::Zero(n, m);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(r + 1, m) : m;
    auto row = a.value().row(r).head(width);
    const S mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    y.row(r).head(width) = e / e.sum();
  }
  const int ia = a.id;
  return t.push(std::move(y), t.needs_grad(ia), [ia](Tape<S>& t, int self) {
    const Matrix<S>& y = t.value(self);
    const Matrix<S>& g = t.grad(self);
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = (g.array() * y.array()).rowwise().sum();
    t.grad(ia).array() += y.array() * (g.array().colwise() - dot.array());
  });
}

// Same-padded temporal unfold: row t becomes [x(t-k/2), ..., x(t+k/2)] (zeros past the edges).
template <class S>
Var<S> unfold_time(Var<S> a, int kernel) {
  detail::require(kernel >= 1 && kernel % 2 == 1, "unfold_time", "kernel must be odd and positive");
  Tape<S>& t = *a.tape;
  const Eigen::Index n = a.rows(), c = a.cols();
  const int half = kernel / 2;
  Matrix<S> v = Matrix<S>::Zero(n, c * kernel);
  for (Eigen::Index r = 0; r < n; ++r)
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index src = r + k - half;
      if (src >= 0 && src < n) v.row(r).segment(k * c, c) = a.value().row(src);
    }
  const int ia = a.id;
  return t.push(std::move(v), t.needs_grad(ia), [ia, kernel, half](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    Matrix<S>& ga = t.grad(ia);
    const Eigen::Index n = ga.rows(), c = ga.cols();
    for (Eigen::Index r = 0; r < n; ++r)
      for (int k = 0; k < kernel; ++k) {
        const Eigen::Index src = r + k - half;
        if (src >= 0 && src < n) ga.row(src) += g.row(r).segment(k * c, c);
      }
  });
}

// Weighted cross-entropy over logit rows: -sum_j w_j * log softmax(logits_j)[target_j].
// Rows with zero weight are skipped entirely, so they never influence the value or gradient.
template <class S>
Var<S> cross_entropy(Var<S> logits, std::vector<int> targets, std::vector<S> weights) {
  detail::require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "cross_entropy", "target length != rows");
  detail::require(weights.size() == targets.size(), "cross_entropy", "weight length != rows");
  Tape<S>& t = *logits.tape;
  const Matrix<S>& z = logits.value();
  Matrix<S> probs = Matrix<S>::Zero(z.rows(), z.cols());
  S loss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    if (weights[r] == S(0)) continue;
    detail::require(targets[r] >= 0 && targets[r] < z.cols(), "cross_entropy", "target out of range");
    const S mx = z.row(r).maxCoeff();
    auto e = (z.row(r).array() - mx).exp();
    const S lse = mx + std::log(e.sum());
    probs.row(r) = e / e.sum();
    loss -= weights[r] * (z(r, targets[r]) - lse);
  }
  Matrix<S> v(1, 1);
  v(0, 0) = loss;
  const int il = logits.id;
  return t.push(std::move(v), t.needs_grad(il),
                [il, targets = std::move(targets), weights = std::move(weights), probs = std::move(probs)](Tape<S>& t, int self) {
                  const S g = t.grad(self)(0, 0);
                  Matrix<S>& gl = t.grad(il);
                  for (Eigen::Index r = 0; r < gl.rows(); ++r) {
                    if (weights[r] == S(0)) continue;
                    gl.row(r) += g * weights[r] * probs.row(r);
                    gl(r, targets[r]) -= g * weights[r];
                  }
                });
}

}  // namespace ag
}  // namespace egot2
