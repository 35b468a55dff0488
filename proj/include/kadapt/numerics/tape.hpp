#pragma once

// Reverse-mode differentiation over a fixed set of dense matrix ops.
//
// A Tape records every value produced by an op together with a closure that
// pushes the output adjoint back to the op's inputs. Nodes that do not depend
// on any parameter carry no closure, so an inference-only forward pass costs
// little more than the raw arithmetic.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kadapt/numerics/matrix.hpp"

namespace kadapt::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
class Tape {
 public:
  using Matrix = Mat<T>;
  using Backward = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix v) { return push(std::move(v), false, {}); }
  Var<T> parameter(Matrix v) { return push(std::move(v), true, {}); }

  const Matrix& value(Var<T> v) const { return nodes_.at(check(v)).value; }

  /// Adjoint of `v` after backward(); zeros if nothing flowed into it.
  Matrix grad(Var<T> v) const {
    const Node& n = nodes_.at(check(v));
    if (n.has_grad) return n.grad;
    return Matrix::Zero(n.value.rows(), n.value.cols());
  }

  bool requires_grad(Var<T> v) const { return nodes_.at(check(v)).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure in reverse order.
  void backward(Var<T> root) {
    const int r = check(root);
    require(nodes_[r].value.size() == 1, ErrorKind::Dimension, "backward root must be 1x1");
    for (auto& n : nodes_) {
      n.has_grad = false;
    }
    accumulate(r).setOnes();
    for (int i = r; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.back) n.back(*this);
    }
  }

  // -- op authoring interface ------------------------------------------------

  Var<T> push(Matrix value, bool requires_grad, Backward back) {
    require(value.allFinite(), ErrorKind::Parameter, "non-finite value recorded on tape");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = requires_grad ? std::move(back) : Backward{};
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  /// Output adjoint of node `id` (valid inside a backward closure).
  const Matrix& out_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Matrix& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Adjoint accumulator for node `id`, zero-initialized on first touch.
  Matrix& accumulate(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  int check(Var<T> v) const {
    require(v.tape == this && v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(),
            ErrorKind::Parameter, "variable does not belong to this tape");
    return v.id;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward back;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  require(a.tape != nullptr && a.tape == b.tape, ErrorKind::Parameter, "operands live on different tapes");
  return *a.tape;
}

inline void shape_check(bool ok, const std::string& op, Eigen::Index r1, Eigen::Index c1, Eigen::Index r2,
                        Eigen::Index c2) {
  if (!ok)
    fail(ErrorKind::Dimension, op + ": incompatible shapes " + std::to_string(r1) + "x" + std::to_string(c1) +
                                   " and " + std::to_string(r2) + "x" + std::to_string(c2));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a * b
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::shape_check(av.cols() == bv.rows(), "matmul", av.rows(), av.cols(), bv.rows(), bv.cols());
  const int ia = a.id, ib = b.id, io = t.next_id();
  Mat<T> out = av * bv;
  return t.push(std::move(out), t.needs(ia) || t.needs(ib), [ia, ib, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ia)) tp.accumulate(ia).noalias() += g * tp.val(ib).transpose();
    if (tp.needs(ib)) tp.accumulate(ib).noalias() += tp.val(ia).transpose() * g;
  });
}

/// a * b^T, the natural form for a row batch through a (d_out x d_in) weight.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::shape_check(av.cols() == bv.cols(), "matmul_nt", av.rows(), av.cols(), bv.rows(), bv.cols());
  const int ia = a.id, ib = b.id, io = t.next_id();
  Mat<T> out = av * bv.transpose();
  return t.push(std::move(out), t.needs(ia) || t.needs(ib), [ia, ib, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ia)) tp.accumulate(ia).noalias() += g * tp.val(ib);
    if (tp.needs(ib)) tp.accumulate(ib).noalias() += g.transpose() * tp.val(ia);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& t = *a.tape;
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().transpose();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    tp.accumulate(ia) += tp.out_grad(io).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::shape_check(av.rows() == bv.rows() && av.cols() == bv.cols(), "add", av.rows(), av.cols(), bv.rows(),
                      bv.cols());
  const int ia = a.id, ib = b.id, io = t.next_id();
  Mat<T> out = av + bv;
  return t.push(std::move(out), t.needs(ia) || t.needs(ib), [ia, ib, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ia)) tp.accumulate(ia) += g;
    if (tp.needs(ib)) tp.accumulate(ib) += g;
  });
}

/// Adds a 1 x m row to every row of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  Tape<T>& t = detail::same_tape(a, row);
  const auto& av = a.value();
  const auto& rv = row.value();
  detail::shape_check(rv.rows() == 1 && rv.cols() == av.cols(), "add_row", av.rows(), av.cols(), rv.rows(),
                      rv.cols());
  const int ia = a.id, ib = row.id, io = t.next_id();
  Mat<T> out = av.rowwise() + rv.row(0);
  return t.push(std::move(out), t.needs(ia) || t.needs(ib), [ia, ib, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ia)) tp.accumulate(ia) += g;
    if (tp.needs(ib)) tp.accumulate(ib) += g.colwise().sum();
  });
}

template <typename T>
Var<T> scale(Var<T> a, double c) {
  Tape<T>& t = *a.tape;
  const int ia = a.id, io = t.next_id();
  const T ct = static_cast<T>(c);
  Mat<T> out = a.value() * ct;
  return t.push(std::move(out), t.needs(ia), [ia, io, ct](Tape<T>& tp) {
    tp.accumulate(ia) += tp.out_grad(io) * ct;
  });
}

/// Elementwise product with a constant matrix (masks, fixed weights).
template <typename T>
Var<T> mul_const(Var<T> a, const Mat<T>& m) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  detail::shape_check(av.rows() == m.rows() && av.cols() == m.cols(), "mul_const", av.rows(), av.cols(), m.rows(),
                      m.cols());
  const int ia = a.id, io = t.next_id();
  Mat<T> out = av.cwiseProduct(m);
  return t.push(std::move(out), t.needs(ia), [ia, io, m](Tape<T>& tp) {
    tp.accumulate(ia) += tp.out_grad(io).cwiseProduct(m);
  });
}

/// s * a for a 1x1 variable s.
template <typename T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  Tape<T>& t = detail::same_tape(a, s);
  require(s.value().size() == 1, ErrorKind::Dimension, "mul_scalar expects a 1x1 scalar");
  const int ia = a.id, is = s.id, io = t.next_id();
  Mat<T> out = a.value() * s.value()(0, 0);
  return t.push(std::move(out), t.needs(ia) || t.needs(is), [ia, is, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ia)) tp.accumulate(ia) += g * tp.val(is)(0, 0);
    if (tp.needs(is)) tp.accumulate(is)(0, 0) += g.cwiseProduct(tp.val(ia)).sum();
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tape<T>& t = *a.tape;
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().array().exp().matrix();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    tp.accumulate(ia) += tp.out_grad(io).cwiseProduct(tp.val(io));
  });
}

template <typename T>
Var<T> log(Var<T> a) {
  Tape<T>& t = *a.tape;
  require((a.value().array() > T(0)).all(), ErrorKind::Domain, "log of a non-positive value");
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().array().log().matrix();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    tp.accumulate(ia) += tp.out_grad(io).cwiseQuotient(tp.val(ia));
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().cwiseMax(T(0));
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    tp.accumulate(ia) += (tp.val(ia).array() > T(0)).select(tp.out_grad(io), T(0)).matrix();
  });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const int ia = a.id, io = t.next_id();
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Mat<T> out = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  return t.push(std::move(out), t.needs(ia), [ia, io, inv_sqrt2](Tape<T>& tp) {
    const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    const auto& x = tp.val(ia);
    const auto& g = tp.out_grad(io);
    auto& acc = tp.accumulate(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const T xi = x.data()[i];
      const T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
      acc.data()[i] += g.data()[i] * (cdf + xi * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with affine 1 x m gain and shift.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, double eps = 1e-5) {
  Tape<T>& t = detail::same_tape(x, gain);
  detail::same_tape(x, shift);
  const auto& xv = x.value();
  const Eigen::Index m = xv.cols();
  detail::shape_check(gain.rows() == 1 && gain.cols() == m && shift.rows() == 1 && shift.cols() == m, "layer_norm",
                      xv.rows(), m, gain.rows(), gain.cols());
  auto xhat = std::make_shared<Mat<T>>(xv.rows(), m);
  auto inv_std = std::make_shared<Vec<T>>(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const T mean = xv.row(i).mean();
    const T var = (xv.row(i).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)(i) = is;
    xhat->row(i) = (xv.row(i).array() - mean) * is;
  }
  Mat<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() + shift.value().row(0).array();
  const int ix = x.id, ig = gain.id, ib = shift.id, io = t.next_id();
  const bool rg = t.needs(ix) || t.needs(ig) || t.needs(ib);
  return t.push(std::move(out), rg, [ix, ig, ib, io, xhat, inv_std](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    if (tp.needs(ig)) tp.accumulate(ig) += g.cwiseProduct(*xhat).colwise().sum();
    if (tp.needs(ib)) tp.accumulate(ib) += g.colwise().sum();
    if (tp.needs(ix)) {
      const auto& gain_v = tp.val(ig);
      auto& acc = tp.accumulate(ix);
      const T inv_m = T(1) / static_cast<T>(g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const auto dxhat = (g.row(i).array() * gain_v.row(0).array()).eval();
        const T mean_d = dxhat.sum() * inv_m;
        const T mean_dx = (dxhat * xhat->row(i).array()).sum() * inv_m;
        acc.row(i).array() += (*inv_std)(i) * (dxhat - mean_d - xhat->row(i).array() * mean_dx);
      }
    }
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  Mat<T> out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    const auto e = (av.row(i).array() - av.row(i).maxCoeff()).exp().eval();
    out.row(i) = e / e.sum();
  }
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    const auto& y = tp.val(io);
    const auto& g = tp.out_grad(io);
    const Vec<T> dot = g.cwiseProduct(y).rowwise().sum();
    tp.accumulate(ia) += (y.array() * (g.colwise() - dot).array()).matrix();
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  Mat<T> out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    const T mx = av.row(i).maxCoeff();
    const T lse = mx + std::log((av.row(i).array() - mx).exp().sum());
    out.row(i) = av.row(i).array() - lse;
  }
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    const Mat<T> p = tp.val(io).array().exp().matrix();
    const Vec<T> gs = g.rowwise().sum();
    tp.accumulate(ia) += g - (p.array().colwise() * gs.array()).matrix();
  });
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> a, double eps = 1e-12) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  auto norms = std::make_shared<Vec<T>>(av.rows());
  Mat<T> out(av.rows(), av.cols());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    (*norms)(i) = std::sqrt(av.row(i).squaredNorm() + static_cast<T>(eps));
    out.row(i) = av.row(i) / (*norms)(i);
  }
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io, norms](Tape<T>& tp) {
    const auto& y = tp.val(io);
    const auto& g = tp.out_grad(io);
    auto& acc = tp.accumulate(ia);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const T yg = y.row(i).dot(g.row(i));
      acc.row(i) += (g.row(i) - y.row(i) * yg) / (*norms)(i);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), ErrorKind::EmptyInput, "concat_rows of nothing");
  Tape<T>& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<int> ids;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    detail::shape_check(p.cols() == cols, "concat_rows", p.rows(), p.cols(), rows, cols);
    rows += p.rows();
    ids.push_back(p.id);
    rg = rg || t.needs(p.id);
  }
  Mat<T> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  const int io = t.next_id();
  return t.push(std::move(out), rg, [ids, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index r = tp.val(id).rows();
      if (tp.needs(id)) tp.accumulate(id) += g.middleRows(off, r);
      off += r;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  require(!parts.empty(), ErrorKind::EmptyInput, "concat_cols of nothing");
  Tape<T>& t = *parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    detail::shape_check(p.rows() == rows, "concat_cols", p.rows(), p.cols(), rows, cols);
    cols += p.cols();
    ids.push_back(p.id);
    rg = rg || t.needs(p.id);
  }
  Mat<T> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  const int io = t.next_id();
  return t.push(std::move(out), rg, [ids, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index c = tp.val(id).cols();
      if (tp.needs(id)) tp.accumulate(id) += g.middleCols(off, c);
      off += c;
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  Tape<T>& t = *a.tape;
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorKind::Index, "slice_cols out of range");
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().middleCols(start, count);
  return t.push(std::move(out), t.needs(ia), [ia, io, start, count](Tape<T>& tp) {
    tp.accumulate(ia).middleCols(start, count) += tp.out_grad(io);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
  Tape<T>& t = *a.tape;
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorKind::Index, "slice_rows out of range");
  const int ia = a.id, io = t.next_id();
  Mat<T> out = a.value().middleRows(start, count);
  return t.push(std::move(out), t.needs(ia), [ia, io, start, count](Tape<T>& tp) {
    tp.accumulate(ia).middleRows(start, count) += tp.out_grad(io);
  });
}

/// Embedding lookup: row k of the result is row index[k] of the table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int> index) {
  Tape<T>& t = *table.tape;
  const auto& tv = table.value();
  Mat<T> out(static_cast<Eigen::Index>(index.size()), tv.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    require(index[k] >= 0 && index[k] < tv.rows(), ErrorKind::Index,
            "gather_rows index " + std::to_string(index[k]) + " out of range");
    out.row(static_cast<Eigen::Index>(k)) = tv.row(index[k]);
  }
  const int ia = table.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io, index = std::move(index)](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    auto& acc = tp.accumulate(ia);
    for (std::size_t k = 0; k < index.size(); ++k) acc.row(index[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

/// N x 1 column holding a(k, index[k]).
template <typename T>
Var<T> pick(Var<T> a, std::vector<int> index) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  require(static_cast<Eigen::Index>(index.size()) == av.rows(), ErrorKind::Dimension, "pick needs one index per row");
  Mat<T> out(av.rows(), 1);
  for (Eigen::Index k = 0; k < av.rows(); ++k) {
    const int c = index[static_cast<std::size_t>(k)];
    require(c >= 0 && c < av.cols(), ErrorKind::Label, "pick index " + std::to_string(c) + " out of range");
    out(k, 0) = av(k, c);
  }
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io, index = std::move(index)](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    auto& acc = tp.accumulate(ia);
    for (Eigen::Index k = 0; k < g.rows(); ++k) acc(k, index[static_cast<std::size_t>(k)]) += g(k, 0);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    tp.accumulate(ia).array() += tp.out_grad(io)(0, 0);
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  require(a.value().size() > 0, ErrorKind::EmptyInput, "mean of an empty matrix");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

/// N x 1 column of per-row sums.
template <typename T>
Var<T> sum_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out = a.value().rowwise().sum();
  const int ia = a.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ia), [ia, io](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    tp.accumulate(ia).colwise() += g.col(0);
  });
}

// ---------------------------------------------------------------------------
// Composite blocks with hand-derived adjoints
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention over `samples` independent
/// sequences of `seq` rows each. q, k, v are (samples*seq) x d; d % heads == 0.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, Eigen::Index seq, Eigen::Index heads) {
  Tape<T>& t = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const Eigen::Index d = qv.cols();
  require(seq > 0 && heads > 0 && d % heads == 0 && qv.rows() % seq == 0, ErrorKind::Dimension,
          "attention shape mismatch");
  require(kv.rows() == qv.rows() && vv.rows() == qv.rows() && kv.cols() == d && vv.cols() == d,
          ErrorKind::Dimension, "attention q/k/v shapes differ");
  const Eigen::Index dh = d / heads;
  const Eigen::Index samples = qv.rows() / seq;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto probs = std::make_shared<std::vector<Mat<T>>>(static_cast<std::size_t>(samples * heads));
  Mat<T> out(qv.rows(), d);
  for (Eigen::Index n = 0; n < samples; ++n) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = qv.block(n * seq, h * dh, seq, dh);
      const auto kb = kv.block(n * seq, h * dh, seq, dh);
      const auto vb = vv.block(n * seq, h * dh, seq, dh);
      Mat<T> s = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < seq; ++i) {
        s.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.block(n * seq, h * dh, seq, dh).noalias() = s * vb;
      (*probs)[static_cast<std::size_t>(n * heads + h)] = std::move(s);
    }
  }
  const int iq = q.id, ik = k.id, iv = v.id, io = t.next_id();
  const bool rg = t.needs(iq) || t.needs(ik) || t.needs(iv);
  return t.push(std::move(out), rg, [iq, ik, iv, io, seq, heads, dh, samples, inv_sqrt, probs](Tape<T>& tp) {
    const auto& g = tp.out_grad(io);
    const auto& qv2 = tp.val(iq);
    const auto& kv2 = tp.val(ik);
    const auto& vv2 = tp.val(iv);
    for (Eigen::Index n = 0; n < samples; ++n) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Mat<T>& p = (*probs)[static_cast<std::size_t>(n * heads + h)];
        const auto gb = g.block(n * seq, h * dh, seq, dh);
        if (tp.needs(iv)) tp.accumulate(iv).block(n * seq, h * dh, seq, dh).noalias() += p.transpose() * gb;
        if (!tp.needs(iq) && !tp.needs(ik)) continue;
        const Mat<T> dp = gb * vv2.block(n * seq, h * dh, seq, dh).transpose();
        const Vec<T> dot = dp.cwiseProduct(p).rowwise().sum();
        const Mat<T> ds = (p.array() * (dp.colwise() - dot).array()).matrix() * inv_sqrt;
        if (tp.needs(iq))
          tp.accumulate(iq).block(n * seq, h * dh, seq, dh).noalias() += ds * kv2.block(n * seq, h * dh, seq, dh);
        if (tp.needs(ik))
          tp.accumulate(ik).block(n * seq, h * dh, seq, dh).noalias() +=
              ds.transpose() * qv2.block(n * seq, h * dh, seq, dh);
      }
    }
  });
}

/// N x N Euclidean distances sqrt(|x_i - x_j|^2 + eps).
template <typename T>
Var<T> pairwise_distance(Var<T> x, double eps = 1e-12) {
  Tape<T>& t = *x.tape;
  const auto& xv = x.value();
  const Eigen::Index n = xv.rows();
  Mat<T> out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = std::sqrt((xv.row(i) - xv.row(j)).squaredNorm() + static_cast<T>(eps));
  const int ix = x.id, io = t.next_id();
  return t.push(std::move(out), t.needs(ix), [ix, io](Tape<T>& tp) {
    const auto& xv2 = tp.val(ix);
    const auto& d = tp.val(io);
    const auto& g = tp.out_grad(io);
    Mat<T> w = g.cwiseQuotient(d);
    w.diagonal().setZero();
    const Mat<T> sym = w + w.transpose();
    const Vec<T> rs = sym.rowwise().sum();
    tp.accumulate(ix) += (xv2.array().colwise() * rs.array()).matrix() - sym * xv2;
  });
}

/// Batch-hard triplet loss over a distance matrix: for each anchor with a
/// negative in the batch, max(0, margin + hardest positive - hardest negative),
/// averaged over those anchors. Every anchor needs at least one positive.
template <typename T>
Var<T> batch_hard_triplet(Var<T> dist, const std::vector<int>& labels, double margin) {
  Tape<T>& t = *dist.tape;
  const auto& d = dist.value();
  const Eigen::Index n = d.rows();
  require(d.cols() == n && static_cast<Eigen::Index>(labels.size()) == n, ErrorKind::Dimension,
          "batch_hard_triplet needs a square distance matrix and one label per row");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> chosen;  // (positive, negative) per active anchor
  std::vector<Eigen::Index> anchors;
  T total = 0;
  Eigen::Index counted = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index pos = -1, neg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        if (pos < 0 || d(i, j) > d(i, pos)) pos = j;
      } else if (neg < 0 || d(i, j) < d(i, neg)) {
        neg = j;
      }
    }
    if (pos < 0) fail(ErrorKind::Sampler, "triplet anchor " + std::to_string(i) + " has no positive in the batch");
    if (neg < 0) continue;
    ++counted;
    const T l = static_cast<T>(margin) + d(i, pos) - d(i, neg);
    if (l > T(0)) {
      total += l;
      anchors.push_back(i);
      chosen.emplace_back(pos, neg);
    }
  }
  Mat<T> out(1, 1);
  out(0, 0) = counted > 0 ? total / static_cast<T>(counted) : T(0);
  const int id = dist.id, io = t.next_id();
  return t.push(std::move(out), t.needs(id), [id, io, anchors, chosen, counted](Tape<T>& tp) {
    const T g = tp.out_grad(io)(0, 0) / static_cast<T>(std::max<Eigen::Index>(counted, 1));
    auto& acc = tp.accumulate(id);
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      acc(anchors[k], chosen[k].first) += g;
      acc(anchors[k], chosen[k].second) -= g;
    }
  });
}

/// Mean cross-entropy of row logits against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> labels) {
  return scale(mean_all(pick(log_softmax_rows(logits), std::move(labels))), -1.0);
}

}  // namespace kadapt::ad
