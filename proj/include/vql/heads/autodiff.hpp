#pragma once

// Reverse-mode differentiation over dense Eigen matrices. A Tape records every
// operation of one forward pass; backward() walks it in reverse and
// accumulates gradients into the tape nodes and into parameter sinks.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vql/core/errors.hpp"

namespace vql::ad {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Named trainable arrays with gradient accumulators. Iteration order is by name.
template <typename Scalar>
class ParamStore {
 public:
  struct Param {
    Mat<Scalar> value;
    Mat<Scalar> grad;
  };

  Mat<Scalar>& add(const std::string& name, Mat<Scalar> value) {
    auto [it, inserted] = params_.emplace(name, Param{});
    if (!inserted) throw ConfigError("duplicate parameter " + name);
    it->second.grad = Mat<Scalar>::Zero(value.rows(), value.cols());
    it->second.value = std::move(value);
    return it->second.value;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  Param& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  Mat<Scalar>& value(const std::string& name) { return at(name).value; }
  const Mat<Scalar>& value(const std::string& name) const { return at(name).value; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.setZero();
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Param> params_;
};

template <typename Scalar>
class Tape;

/// Handle to a tape node.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const { return tape->value(id); }
  const Mat<Scalar>& grad() const { return tape->grad(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var<Scalar> constant(Mat<Scalar> v) { return push(std::move(v), nullptr); }

  /// Leaf whose gradient is added into `store.at(name).grad` on backward.
  Var<Scalar> param(ParamStore<Scalar>& store, const std::string& name) {
    auto& p = store.at(name);
    Mat<Scalar>* sink = &p.grad;
    return push(p.value, [sink](Tape& t, int self) {
      if (t.nodes_[self].grad.size() != 0) *sink += t.nodes_[self].grad;
    });
  }

  Var<Scalar> push(Mat<Scalar> value, Backward back) {
    nodes_.push_back(Node{std::move(value), Mat<Scalar>(), std::move(back)});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<Scalar>& value(int id) const { return nodes_[id].value; }
  const Mat<Scalar>& grad(int id) const { return nodes_[id].grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(Var<Scalar> root) {
    if (root.rows() != 1 || root.cols() != 1) throw NumericError("backward() needs a scalar root");
    accumulate(root.id, Mat<Scalar>::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      if (nodes_[i].grad.size() != 0 && nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes follow a row convention: a set of N tokens is N x C.

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  return t.push(a.value() * b.value(), [a, b](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(a.id, g * t.value(b.id).transpose());
    t.accumulate(b.id, t.value(a.id).transpose() * g);
  });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("add: shape mismatch");
  return a.tape->push(a.value() + b.value(), [a, b](Tape<S>& t, int self) {
    t.accumulate(a.id, t.grad(self));
    t.accumulate(b.id, t.grad(self));
  });
}

template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("sub: shape mismatch");
  return a.tape->push(a.value() - b.value(), [a, b](Tape<S>& t, int self) {
    t.accumulate(a.id, t.grad(self));
    t.accumulate(b.id, -t.grad(self));
  });
}

/// a (N x C) plus a broadcast row r (1 x C).
template <typename S>
Var<S> add_row(Var<S> a, Var<S> r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw NumericError("add_row: shape mismatch");
  Mat<S> v = a.value();
  v.rowwise() += r.value().row(0);
  return a.tape->push(std::move(v), [a, r](Tape<S>& t, int self) {
    t.accumulate(a.id, t.grad(self));
    t.accumulate(r.id, t.grad(self).colwise().sum());
  });
}

/// Affine map of row tokens: x W + b.
template <typename S>
Var<S> affine(Var<S> x, Var<S> w, Var<S> b) {
  return add_row(matmul(x, w), b);
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  return a.tape->push(a.value() * s, [a, s](Tape<S>& t, int self) { t.accumulate(a.id, t.grad(self) * s); });
}

/// a times a 1x1 variable s.
template <typename S>
Var<S> scale_by(Var<S> a, Var<S> s) {
  if (s.rows() != 1 || s.cols() != 1) throw NumericError("scale_by: expected a scalar");
  return a.tape->push(a.value() * s.value()(0, 0), [a, s](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(a.id, g * t.value(s.id)(0, 0));
    t.accumulate(s.id, Mat<S>::Constant(1, 1, g.cwiseProduct(t.value(a.id)).sum()));
  });
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  return a.tape->push(a.value().cwiseProduct(b.value()), [a, b](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
    t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Mat<S> y = a.value().unaryExpr([](S v) {
    return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  });
  return a.tape->push(std::move(y), [a](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    t.accumulate(a.id, t.grad(self).cwiseProduct(y.cwiseProduct((Mat<S>::Ones(y.rows(), y.cols()) - y))));
  });
}

template <typename S>
Var<S> relu(Var<S> a) {
  return a.tape->push(a.value().cwiseMax(S(0)), [a](Tape<S>& t, int self) {
    const Mat<S> mask = (t.value(a.id).array() > S(0)).template cast<S>().matrix();
    t.accumulate(a.id, t.grad(self).cwiseProduct(mask));
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  return a.tape->push(a.value().transpose(), [a](Tape<S>& t, int self) { t.accumulate(a.id, t.grad(self).transpose()); });
}

/// Row-wise softmax.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Mat<S> y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return a.tape->push(std::move(y), [a](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    const Mat<S>& g = t.grad(self);
    Mat<S> d = y.cwiseProduct(g);
    const auto row_dot = d.rowwise().sum();
    for (Eigen::Index i = 0; i < y.rows(); ++i) d.row(i) -= y.row(i) * row_dot(i);
    t.accumulate(a.id, d);
  });
}

/// Row-wise layer normalization with learned gain and bias (1 x C each).
template <typename S>
Var<S> layer_norm_rows(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  const Mat<S>& x = a.value();
  const Eigen::Index n = x.rows(), c = x.cols();
  Mat<S> xhat(n, c);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).matrix();
    const S var = centered.squaredNorm() / static_cast<S>(c);
    inv_std(i) = S(1) / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Mat<S> y = xhat.array().rowwise() * gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  return a.tape->push(std::move(y), [a, gain, bias, xhat, inv_std](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
    t.accumulate(bias.id, g.colwise().sum());
    const Mat<S> gx = g.array().rowwise() * t.value(gain.id).row(0).array();
    const S c = static_cast<S>(xhat.cols());
    Mat<S> d(xhat.rows(), xhat.cols());
    for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
      const S m1 = gx.row(i).sum() / c;
      const S m2 = gx.row(i).dot(xhat.row(i)) / c;
      d.row(i) = inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
    }
    t.accumulate(a.id, d);
  });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  if (a.rows() != b.rows()) throw NumericError("concat_cols: row mismatch");
  Mat<S> v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape->push(std::move(v), [a, b, ca, cb](Tape<S>& t, int self) {
    t.accumulate(a.id, t.grad(self).leftCols(ca));
    t.accumulate(b.id, t.grad(self).rightCols(cb));
  });
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  if (a.cols() != b.cols()) throw NumericError("concat_rows: column mismatch");
  Mat<S> v(a.rows() + b.rows(), a.cols());
  v << a.value(), b.value();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return a.tape->push(std::move(v), [a, b, ra, rb](Tape<S>& t, int self) {
    t.accumulate(a.id, t.grad(self).topRows(ra));
    t.accumulate(b.id, t.grad(self).bottomRows(rb));
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index n) {
  return a.tape->push(a.value().middleCols(start, n), [a, start, n](Tape<S>& t, int self) {
    Mat<S> d = Mat<S>::Zero(t.value(a.id).rows(), t.value(a.id).cols());
    d.middleCols(start, n) = t.grad(self);
    t.accumulate(a.id, d);
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index n) {
  return a.tape->push(a.value().middleRows(start, n), [a, start, n](Tape<S>& t, int self) {
    Mat<S> d = Mat<S>::Zero(t.value(a.id).rows(), t.value(a.id).cols());
    d.middleRows(start, n) = t.grad(self);
    t.accumulate(a.id, d);
  });
}

/// Repeats a 1 x C row n times.
template <typename S>
Var<S> repeat_rows(Var<S> r, Eigen::Index n) {
  if (r.rows() != 1) throw NumericError("repeat_rows: expected a row");
  return r.tape->push(r.value().replicate(n, 1), [r](Tape<S>& t, int self) {
    t.accumulate(r.id, t.grad(self).colwise().sum());
  });
}

/// Reinterprets the entries of `a`, read in row-major order, as a rows x cols matrix filled row-major.
template <typename S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  if (a.value().size() != rows * cols) throw NumericError("reshape: size mismatch");
  using RM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RM src = a.value();
  const Mat<S> v = Eigen::Map<const RM>(src.data(), rows, cols);
  const Eigen::Index ar = a.rows(), ac = a.cols();
  return a.tape->push(v, [a, ar, ac](Tape<S>& t, int self) {
    const RM g = t.grad(self);
    const Mat<S> d = Eigen::Map<const RM>(g.data(), ar, ac);
    t.accumulate(a.id, d);
  });
}

/// Divides each row by its Euclidean norm (plus eps inside the root).
template <typename S>
Var<S> l2_normalize_rows(Var<S> a, S eps = S(1e-12)) {
  const Mat<S>& x = a.value();
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) inv(i) = S(1) / std::sqrt(x.row(i).squaredNorm() + eps);
  Mat<S> y = inv.asDiagonal() * x;
  return a.tape->push(std::move(y), [a, inv](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    const Mat<S>& g = t.grad(self);
    Mat<S> d(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) d.row(i) = inv(i) * (g.row(i) - y.row(i) * g.row(i).dot(y.row(i)));
    t.accumulate(a.id, d);
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  return a.tape->push(Mat<S>::Constant(1, 1, a.value().sum()), [a](Tape<S>& t, int self) {
    t.accumulate(a.id, Mat<S>::Constant(t.value(a.id).rows(), t.value(a.id).cols(), t.grad(self)(0, 0)));
  });
}

/// Weighted binary cross-entropy of probabilities p (N x 1) against labels y,
/// normalized by the total weight. Probabilities are clamped to [eps, 1 - eps]
/// and receive no gradient where the clamp is active.
template <typename S>
Var<S> weighted_bce(Var<S> p, const Mat<S>& y, const Mat<S>& w, S eps) {
  const Mat<S>& pv = p.value();
  const S wsum = w.sum();
  if (!(wsum > S(0))) throw NumericError("weighted_bce: weights sum to zero");
  S loss = 0;
  for (Eigen::Index i = 0; i < pv.size(); ++i) {
    const S pc = std::clamp(pv(i), eps, S(1) - eps);
    loss -= w(i) * (y(i) * std::log(pc) + (S(1) - y(i)) * std::log(S(1) - pc));
  }
  return p.tape->push(Mat<S>::Constant(1, 1, loss / wsum), [p, y, w, eps, wsum](Tape<S>& t, int self) {
    const Mat<S>& pv = t.value(p.id);
    Mat<S> d = Mat<S>::Zero(pv.rows(), pv.cols());
    const S g = t.grad(self)(0, 0);
    for (Eigen::Index i = 0; i < pv.size(); ++i) {
      if (pv(i) < eps || pv(i) > S(1) - eps) continue;
      d(i) = g * w(i) * (-y(i) / pv(i) + (S(1) - y(i)) / (S(1) - pv(i))) / wsum;
    }
    t.accumulate(p.id, d);
  });
}

/// Sum over masked rows of elementwise smooth-L1(pred - target), divided by `norm`.
template <typename S>
Var<S> smooth_l1(Var<S> pred, const Mat<S>& target, const Mat<S>& row_mask, S beta, S norm) {
  const Mat<S> diff = pred.value() - target;
  S loss = 0;
  for (Eigen::Index i = 0; i < diff.rows(); ++i) {
    if (row_mask(i) == S(0)) continue;
    for (Eigen::Index j = 0; j < diff.cols(); ++j) {
      const S a = std::abs(diff(i, j));
      loss += a < beta ? S(0.5) * a * a / beta : a - S(0.5) * beta;
    }
  }
  return pred.tape->push(Mat<S>::Constant(1, 1, loss / norm), [pred, diff, row_mask, beta, norm](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0);
    Mat<S> d = Mat<S>::Zero(diff.rows(), diff.cols());
    for (Eigen::Index i = 0; i < diff.rows(); ++i) {
      if (row_mask(i) == S(0)) continue;
      for (Eigen::Index j = 0; j < diff.cols(); ++j) {
        const S v = diff(i, j);
        d(i, j) = g * (std::abs(v) < beta ? v / beta : (v > 0 ? S(1) : S(-1))) / norm;
      }
    }
    t.accumulate(pred.id, d);
  });
}

}  // namespace vql::ad
