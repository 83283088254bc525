// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation.
//
// A Tape<T> owns every node created while evaluating an expression; Var<T> is
// a cheap handle (tape pointer + node index). Nodes are appended in
// evaluation order, so reverse index order is a valid topological order and
// the graph is acyclic by construction. One tape belongs to one thread.
//
// The scalar type is a template parameter: inference and the attack run in
// float, gradient checks run the same graph code in double.
#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qattack/quantlinear.hpp"
#include "qattack/tensor.hpp"

namespace qattack::ag {

enum class OpKind {
  constant,
  variable,
  matmul,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  square,
  sqrt,
  mean,
  sum,
  maximum,
  clamp,
  transpose,
  reshape,
  crop,
  concat,
  add_broadcast,
  layer_norm,
  softmax,
  gelu,
  topk,
  patches,
  cross_entropy,
  quant_linear,
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    OpKind op = OpKind::constant;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(TensorT value) { return leaf(std::move(value), false); }
  Var<T> variable(TensorT value) { return leaf(std::move(value), true); }

  /// Appends an interior node. The backward closure is dropped when no parent
  /// is differentiable.
  Var<T> record(OpKind op, TensorT value, std::span<const Var<T>> parents, BackwardFn backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (const auto& p : parents) {
      if (p.tape != this) throw ShapeError("ag: operand belongs to a different tape");
      n.parents.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> record(OpKind op, TensorT value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adjoint buffer of a node; only valid during or after backward().
  TensorT& grad_buffer(std::size_t id) { return nodes_[id].grad; }

  const TensorT& grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.requires_grad) throw ParameterError("ag: gradient requested for a non-differentiable node");
    return n.grad;
  }

  /// Reverse sweep from a scalar root. All adjoints are reset first, so
  /// repeated calls yield identical results.
  void backward(Var<T> root) {
    if (root.tape != this) throw ShapeError("ag: root belongs to a different tape");
    if (nodes_.at(root.id).value.size() != 1) {
      throw ParameterError("ag: backward root must be scalar, got " +
                           shape_string(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) {
      if (!n.requires_grad) continue;
      if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
        n.grad = TensorT(n.value.shape());
      } else {
        std::fill(n.grad.storage().begin(), n.grad.storage().end(), T{0});
      }
    }
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  Var<T> leaf(TensorT value, bool differentiable) {
    require_finite(value, "ag leaf");
    Node n;
    n.op = differentiable ? OpKind::variable : OpKind::constant;
    n.value = std::move(value);
    n.requires_grad = differentiable;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Calls f(dst_offset, src_offset, length) for every contiguous run of the
// box [offsets, offsets + extents) inside a tensor of shape `full`. dst is the
// linear offset within the box, src within the full tensor.
template <class F>
void for_each_run(const Shape& full, const Shape& offsets, const Shape& extents, F&& f) {
  const std::size_t rank = full.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{1});
    return;
  }
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) stride[d - 1] = stride[d] * full[d];
  const std::size_t run = extents[rank - 1];
  if (run == 0) return;
  const std::size_t runs = shape_size(extents) / run;
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t k = 0; k < runs; ++k) {
    std::size_t src = offsets[rank - 1];
    for (std::size_t d = 0; d + 1 < rank; ++d) src += (idx[d] + offsets[d]) * stride[d];
    f(k * run, src, run);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < extents[d]) break;
      idx[d] = 0;
    }
  }
}

template <class T>
T gelu_value(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  BasicTensor<T> out = matmul_ref(a.value(), b.value());
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  return a.tape->record(OpKind::matmul, std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(a.id)) {
      kernels::gemm_nt(m, n, k, g.data().data(), t.value(b.id).data().data(),
                       t.grad_buffer(a.id).data().data());
    }
    if (t.requires_grad(b.id)) {
      kernels::gemm_tn(k, m, n, t.value(a.id).data().data(), g.data().data(),
                       t.grad_buffer(b.id).data().data());
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  return a.tape->record(OpKind::transpose, transpose2d(a.value()), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) += g(r, c);
  });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  return a.tape->record(OpKind::reshape, a.value().reshaped(std::move(shape)), {a},
                        [=](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_buffer(self);
                          auto& ga = t.grad_buffer(a.id);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(OpKind::add, std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    for (std::size_t id : {a.id, b.id}) {
      if (!t.requires_grad(id)) continue;
      auto& gx = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(OpKind::sub, std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(OpKind::mul, std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(a.id);
    const auto& bv2 = t.value(b.id);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape->record(OpKind::scale, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v += c;
  return a.tape->record(OpKind::add_scalar, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> square(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  return a.tape->record(OpKind::square, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(a.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T{2} * av[i] * g[i];
  });
}

/// sqrt(a + eps); eps keeps the derivative finite at zero.
template <class T>
Var<T> sqrt_smooth(Var<T> a, T eps) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) {
    if (v + eps < T{0}) throw InvariantError("sqrt_smooth: negative argument");
    v = std::sqrt(v + eps);
  }
  return a.tape->record(OpKind::sqrt, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (T{2} * y[i]);
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return a.tape->record(OpKind::sum, BasicTensor<T>::scalar(s), {a}, [=](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    for (auto& v : t.grad_buffer(a.id).data()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  T s{0};
  for (T v : a.value().data()) s += v;
  return a.tape->record(OpKind::mean, BasicTensor<T>::scalar(s / static_cast<T>(n)), {a},
                        [=](Tape<T>& t, std::size_t self) {
                          const T g = t.grad_buffer(self)[0] / static_cast<T>(n);
                          for (auto& v : t.grad_buffer(a.id).data()) v += g;
                        });
}

/// max(a, c) elementwise. Gradient flows where a > c strictly.
template <class T>
Var<T> maximum(Var<T> a, T c) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = std::max(v, c);
  return a.tape->record(OpKind::maximum, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(a.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > c) ga[i] += g[i];
  });
}

/// Clamp to [lo, hi]. Gradient passes on the closed interval so pixels sitting
/// exactly on the boundary can still move back inside.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return a.tape->record(OpKind::clamp, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(a.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] >= lo && av[i] <= hi) ga[i] += g[i];
  });
}

template <class T>
Var<T> gelu(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = detail::gelu_value(v);
  return a.tape->record(OpKind::gelu, std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(a.id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::gelu_derivative(av[i]);
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

/// Sub-box [offsets, offsets + extents) of a tensor of any rank.
template <class T>
Var<T> crop(Var<T> a, Shape offsets, Shape extents) {
  const Shape& full = a.shape();
  if (offsets.size() != full.size() || extents.size() != full.size()) {
    throw ShapeError("crop: rank mismatch for " + shape_string(full));
  }
  for (std::size_t d = 0; d < full.size(); ++d) {
    if (offsets[d] + extents[d] > full[d]) {
      throw ShapeError("crop: box exceeds " + shape_string(full) + " on axis " + std::to_string(d));
    }
  }
  BasicTensor<T> out(extents);
  const auto& av = a.value();
  detail::for_each_run(full, offsets, extents, [&](std::size_t o, std::size_t s, std::size_t n) {
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(s), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(o));
  });
  return a.tape->record(OpKind::crop, std::move(out), {a},
                        [=, full = full](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_buffer(self);
                          auto& ga = t.grad_buffer(a.id);
                          detail::for_each_run(full, offsets, extents,
                                               [&](std::size_t o, std::size_t s, std::size_t n) {
                                                 for (std::size_t i = 0; i < n; ++i) ga[s + i] += g[o + i];
                                               });
                        });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  require_rank(a.shape(), 2, "slice_rows");
  return crop(a, {begin, 0}, {end - begin, a.value().cols()});
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  require_rank(a.shape(), 2, "slice_cols");
  return crop(a, {0, begin}, {a.value().rows(), end - begin});
}

/// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank(p.shape(), 2, "concat");
  const std::size_t fixed = parts[0].shape()[1 - axis];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[1 - axis] != fixed) throw ShapeError("concat: operand widths differ");
    total += p.shape()[axis];
  }
  const Shape out_shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  BasicTensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Shape box_off = axis == 0 ? Shape{off, 0} : Shape{0, off};
    const auto& pv = p.value();
    detail::for_each_run(out_shape, box_off, pv.shape(), [&](std::size_t o, std::size_t s, std::size_t n) {
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o), n,
                  out.data().begin() + static_cast<std::ptrdiff_t>(s));
    });
    off += p.shape()[axis];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(
      OpKind::concat, std::move(out), std::span<const Var<T>>(parts),
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (!t.requires_grad(ids[i])) continue;
          auto& gp = t.grad_buffer(ids[i]);
          const Shape box_off = axis == 0 ? Shape{offsets[i], 0} : Shape{0, offsets[i]};
          detail::for_each_run(out_shape, box_off, gp.shape(), [&](std::size_t o, std::size_t s, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j) gp[o + j] += g[s + j];
          });
        }
      });
}

/// x (n x h) + y tiled down the rows; y is a length-h vector or an m x h
/// matrix with m dividing n.
template <class T>
Var<T> add_broadcast(Var<T> x, Var<T> y) {
  require_rank(x.shape(), 2, "add_broadcast");
  const std::size_t n = x.value().rows();
  const std::size_t h = x.value().cols();
  const std::size_t m = y.shape().size() == 1 ? 1 : y.shape()[0];
  if (y.value().size() != m * h || n % m != 0) {
    throw ShapeError("add_broadcast: cannot tile " + shape_string(y.shape()) + " over " +
                     shape_string(x.shape()));
  }
  BasicTensor<T> out = x.value();
  const auto& yv = y.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < h; ++c) out(r, c) += yv[(r % m) * h + c];
  return x.tape->record(OpKind::add_broadcast, std::move(out), {x, y}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(x.id)) {
      auto& gx = t.grad_buffer(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(y.id)) {
      auto& gy = t.grad_buffer(y.id);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < h; ++c) gy[(r % m) * h + c] += g(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// Network layers
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with affine gamma/beta (length h each).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  require_rank(x.shape(), 2, "layer_norm");
  const std::size_t n = x.value().rows();
  const std::size_t h = x.value().cols();
  if (gamma.value().size() != h || beta.value().size() != h) throw ShapeError("layer_norm: affine size");
  BasicTensor<T> xhat({n, h});
  std::vector<T> inv_std(n);
  BasicTensor<T> out({n, h});
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r) {
    T mu{0};
    for (std::size_t c = 0; c < h; ++c) mu += xv(r, c);
    mu /= static_cast<T>(h);
    T var{0};
    for (std::size_t c = 0; c < h; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<T>(h);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < h; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  return x.tape->record(
      OpKind::layer_norm, std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        const auto& gv2 = t.value(gamma.id);
        if (t.requires_grad(gamma.id) || t.requires_grad(beta.id)) {
          const bool want_g = t.requires_grad(gamma.id);
          const bool want_b = t.requires_grad(beta.id);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < h; ++c) {
              if (want_g) t.grad_buffer(gamma.id)[c] += g(r, c) * xhat(r, c);
              if (want_b) t.grad_buffer(beta.id)[c] += g(r, c);
            }
          }
        }
        if (t.requires_grad(x.id)) {
          auto& gx = t.grad_buffer(x.id);
          const T inv_h = T{1} / static_cast<T>(h);
          for (std::size_t r = 0; r < n; ++r) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t c = 0; c < h; ++c) {
              const T d = g(r, c) * gv2[c];
              mean_d += d;
              mean_dx += d * xhat(r, c);
            }
            mean_d *= inv_h;
            mean_dx *= inv_h;
            for (std::size_t c = 0; c < h; ++c) {
              const T d = g(r, c) * gv2[c];
              gx(r, c) += inv_std[r] * (d - mean_d - xhat(r, c) * mean_dx);
            }
          }
        }
      });
}

/// Numerically stable softmax over each row.
template <class T>
Var<T> softmax_rows(Var<T> x) {
  require_rank(x.shape(), 2, "softmax_rows");
  const std::size_t n = x.value().rows();
  const std::size_t m = x.value().cols();
  BasicTensor<T> out = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    T mx = out(r, 0);
    for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, out(r, c));
    T z{0};
    for (std::size_t c = 0; c < m; ++c) {
      out(r, c) = std::exp(out(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < m; ++c) out(r, c) /= z;
  }
  return x.tape->record(OpKind::softmax, std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t r = 0; r < n; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < m; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < m; ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Mean cross-entropy of row-wise logits against integer labels.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t n = logits.value().rows();
  const std::size_t m = logits.value().cols();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count != batch");
  BasicTensor<T> probs = logits.value();
  T loss{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= m) {
      throw ParameterError("cross_entropy: label out of range");
    }
    T mx = probs(r, 0);
    for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, probs(r, c));
    T z{0};
    for (std::size_t c = 0; c < m; ++c) z += std::exp(probs(r, c) - mx);
    loss += std::log(z) + mx - probs(r, static_cast<std::size_t>(labels[r]));
    for (std::size_t c = 0; c < m; ++c) probs(r, c) = std::exp(probs(r, c) - mx) / z;
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(
      OpKind::cross_entropy, BasicTensor<T>::scalar(loss), {logits},
      [=, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0] / static_cast<T>(n);
        auto& gl = t.grad_buffer(logits.id);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < m; ++c) {
            const T target = static_cast<std::size_t>(lab[r]) == c ? T{1} : T{0};
            gl(r, c) += g * (probs(r, c) - target);
          }
        }
      });
}

/// K largest entries of every column (K x h), gradient routed back to the
/// selected positions only.
template <class T>
Var<T> topk_columns(Var<T> x, std::size_t k) {
  auto idx = topk_column_indices(x.value(), k);
  const std::size_t h = x.value().cols();
  BasicTensor<T> out({k, h});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < h; ++j) out(i, j) = xv(idx(i, j), j);
  return x.tape->record(OpKind::topk, std::move(out), {x},
                        [=, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_buffer(self);
                          auto& gx = t.grad_buffer(x.id);
                          for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < h; ++j) gx(idx(i, j), j) += g(i, j);
                        });
}

/// Splits B x C x H x W images into non-overlapping p x p patches.
/// Output row = b * (H/p * W/p) + py * (W/p) + px; column = (c * p + iy) * p + ix.
template <class T>
Var<T> extract_patches(Var<T> images, std::size_t p) {
  require_rank(images.shape(), 4, "extract_patches");
  const Shape s = images.shape();
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (p == 0 || H % p != 0 || W % p != 0) throw ShapeError("extract_patches: size not divisible by patch");
  const std::size_t gh = H / p, gw = W / p;
  const std::size_t rows = B * gh * gw, cols = C * p * p;
  // src index for each output element, shared by forward and backward.
  std::vector<std::size_t> map(rows * cols);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const std::size_t row = (b * gh + py) * gw + px;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t iy = 0; iy < p; ++iy)
            for (std::size_t ix = 0; ix < p; ++ix) {
              const std::size_t col = (c * p + iy) * p + ix;
              map[row * cols + col] = ((b * C + c) * H + py * p + iy) * W + px * p + ix;
            }
      }
  BasicTensor<T> out({rows, cols});
  const auto& iv = images.value();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = iv[map[i]];
  return images.tape->record(OpKind::patches, std::move(out), {images},
                             [=, map = std::move(map)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.grad_buffer(self);
                               auto& gi = t.grad_buffer(images.id);
                               for (std::size_t i = 0; i < map.size(); ++i) gi[map[i]] += g[i];
                             });
}

// ---------------------------------------------------------------------------
// Quantized linear layer
// ---------------------------------------------------------------------------

/// How a quant_linear node evaluates its forward value.
struct LinearExec {
  bool quantized = true;  // false: plain full-precision X·W + b
  QuantThreshold threshold{};
  OutlierPolicy policy{};
  std::vector<MatmulTrace>* traces = nullptr;  // appended per call when set
};

/// y = X·W + b. The forward value comes from the mixed-precision kernel when
/// exec.quantized is set; the backward pass is always that of the
/// full-precision product (straight-through), using the W and b operands.
template <class T>
Var<T> quant_linear(Var<T> x, Var<T> w, Var<T> b, const QuantLinearLayer& layer, const LinearExec& exec) {
  require_rank(x.shape(), 2, "quant_linear");
  const std::size_t s = x.value().rows();
  const std::size_t h = x.value().cols();
  const std::size_t o = w.value().cols();
  if (w.value().rows() != h || b.value().size() != o) {
    throw ShapeError("quant_linear: operand shapes " + shape_string(x.shape()) + " " +
                     shape_string(w.shape()) + " " + shape_string(b.shape()));
  }
  BasicTensor<T> out;
  if (exec.quantized) {
    MixedMatmulResult res;
    if constexpr (std::is_same_v<T, float>) {
      res = mixed_matmul(x.value(), layer, exec.threshold, exec.policy);
      out = std::move(res.output);
    } else {
      res = mixed_matmul(x.value().template cast<float>(), layer, exec.threshold, exec.policy);
      out = res.output.template cast<T>();
    }
    if (exec.traces) exec.traces->push_back(std::move(res.trace));
  } else {
    out = matmul_ref(x.value(), w.value());
    const auto& bv = b.value();
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t j = 0; j < o; ++j) out(r, j) += bv[j];
    if (exec.traces) {
      // Full-precision execution counts every column as high-precision work.
      ColumnSet all(h);
      std::iota(all.begin(), all.end(), std::size_t{0});
      exec.traces->push_back(make_trace(layer.layer_id(), std::move(all), s, h, o));
    }
  }
  return x.tape->record(OpKind::quant_linear, std::move(out), {x, w, b}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(x.id)) {
      kernels::gemm_nt(s, o, h, g.data().data(), t.value(w.id).data().data(),
                       t.grad_buffer(x.id).data().data());
    }
    if (t.requires_grad(w.id)) {
      kernels::gemm_tn(h, s, o, t.value(x.id).data().data(), g.data().data(),
                       t.grad_buffer(w.id).data().data());
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t j = 0; j < o; ++j) gb[j] += g(r, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Scalar function of one tensor argument, expressed on a tape.
using ScalarGraphFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Compares the reverse-mode gradient of f at x with central differences of
/// step h. Returns max_i |analytic_i - central_i| / max(|central_i|, 1e-12)
/// over all coordinates not rejected by `exclude`.
inline double finite_diff_check(const ScalarGraphFn& f, const BasicTensor<double>& x, double h = 1e-5,
                                const std::function<bool(std::size_t)>& exclude = {}) {
  Tape<double> tape;
  Var<double> xv = tape.variable(x);
  Var<double> root = f(tape, xv);
  tape.backward(root);
  const BasicTensor<double> analytic = tape.grad(xv);

  auto eval = [&](const BasicTensor<double>& at) {
    Tape<double> t;
    return f(t, t.constant(at)).value().item();
  };

  double worst = 0.0;
  BasicTensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (exclude && exclude(i)) continue;
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double central = (fp - fm) / (2.0 * h);
    const double rel = std::fabs(analytic[i] - central) / std::max(std::fabs(central), 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace qattack::ag
