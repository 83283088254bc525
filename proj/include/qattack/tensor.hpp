// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors, absmax int8 quantization, binary16 emulation and
// the full-precision reference kernels everything else is checked against.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "qattack/errors.hpp"

namespace qattack {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  /// 2-D tensor from nested row lists; all rows must have equal length.
  static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  T& operator()(std::size_t a, std::size_t b, std::size_t c) noexcept {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  const T& operator()(std::size_t a, std::size_t b, std::size_t c) const noexcept {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

template <class T>
void require_finite(const BasicTensor<T>& t, const char* what) {
  if (!t.all_finite()) throw InvariantError(std::string(what) + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Reference GEMM kernels. Accumulation happens in T.
// ---------------------------------------------------------------------------
namespace kernels {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T. B is transposed into a scratch buffer so
// the inner loop runs over contiguous output columns.
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

/// Full-precision product A·B of two 2-D tensors.
template <class T>
BasicTensor<T> matmul_ref(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_ref lhs");
  require_rank(b.shape(), 2, "matmul_ref rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul_ref: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  BasicTensor<T> c({a.rows(), b.cols()});
  kernels::gemm_nn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

template <class T>
BasicTensor<T> transpose2d(const BasicTensor<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

// ---------------------------------------------------------------------------
// binary16 emulation
// ---------------------------------------------------------------------------

inline constexpr double kHalfMax = 65504.0;

/// Nearest binary16 value (ties to even), kept in T. Saturates at ±65504.
template <class T>
T round_to_half(T x) {
  static_assert(std::is_floating_point_v<T>);
  const T ax = std::fabs(x);
  if (!(ax < static_cast<T>(kHalfMax))) {
    return std::isnan(x) ? x : std::copysign(static_cast<T>(kHalfMax), x);
  }
  if (ax == T{0}) return x;
  int e = 0;
  std::frexp(ax, &e);  // ax = m * 2^e, m in [0.5, 1)
  // Normal halves carry 10 fraction bits; below 2^-14 the spacing is fixed at 2^-24.
  const int unbiased = std::max(e - 1, -14);
  const T quantum = std::ldexp(T{1}, unbiased - 10);
  const T r = std::nearbyint(ax / quantum) * quantum;
  return std::copysign(r, x);
}

template <class T>
BasicTensor<T> round_to_half(const BasicTensor<T>& t) {
  BasicTensor<T> out = t;
  for (auto& v : out.data()) v = round_to_half(v);
  return out;
}

// ---------------------------------------------------------------------------
// absmax int8 quantization
// ---------------------------------------------------------------------------

enum class QuantAxis { row_wise, column_wise };

/// int8 values plus one positive scale per quantized row (row_wise) or column
/// (column_wise). Dequantized value = values / scale.
struct QuantizedMatrix {
  BasicTensor<std::int8_t> values;
  std::vector<float> scales;
  QuantAxis axis = QuantAxis::row_wise;

  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }
};

inline std::int8_t quantize_value(float v, float scale) {
  // std::round is half-away-from-zero.
  const float q = std::round(scale * v);
  return static_cast<std::int8_t>(std::clamp(q, -127.0f, 127.0f));
}

inline float absmax_scale(float absmax) { return absmax > 0.0f ? 127.0f / absmax : 1.0f; }

inline QuantizedMatrix absmax_quantize(const Tensor& x, QuantAxis axis) {
  require_rank(x.shape(), 2, "absmax_quantize");
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  QuantizedMatrix q{BasicTensor<std::int8_t>({rows, cols}), {}, axis};
  if (axis == QuantAxis::row_wise) {
    q.scales.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      float m = 0.0f;
      for (std::size_t c = 0; c < cols; ++c) m = std::max(m, std::fabs(x(r, c)));
      const float s = absmax_scale(m);
      q.scales[r] = s;
      for (std::size_t c = 0; c < cols; ++c) q.values(r, c) = quantize_value(x(r, c), s);
    }
  } else {
    std::vector<float> m(cols, 0.0f);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) m[c] = std::max(m[c], std::fabs(x(r, c)));
    q.scales.resize(cols);
    for (std::size_t c = 0; c < cols; ++c) q.scales[c] = absmax_scale(m[c]);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) q.values(r, c) = quantize_value(x(r, c), q.scales[c]);
  }
  return q;
}

/// C[i,j] = P[i,j] / (row_scales[i] * col_scales[j]).
inline Tensor dequantize_product(const BasicTensor<std::int32_t>& p, std::span<const float> row_scales,
                                 std::span<const float> col_scales) {
  require_rank(p.shape(), 2, "dequantize_product");
  if (p.rows() != row_scales.size() || p.cols() != col_scales.size()) {
    throw ShapeError("dequantize_product: scale counts do not match product " + shape_string(p.shape()));
  }
  auto positive = [](float s) { return s > 0.0f && std::isfinite(s); };
  if (!std::all_of(row_scales.begin(), row_scales.end(), positive) ||
      !std::all_of(col_scales.begin(), col_scales.end(), positive)) {
    throw InvariantError("dequantize_product: scales must be strictly positive");
  }
  Tensor c({p.rows(), p.cols()});
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j)
      c(i, j) = static_cast<float>(p(i, j)) / (row_scales[i] * col_scales[j]);
  return c;
}

// ---------------------------------------------------------------------------
// top-K per column
// ---------------------------------------------------------------------------

/// Row indices of the K largest entries of each column, descending by value,
/// lower row first on ties. Result is K x h.
template <class T>
BasicTensor<std::size_t> topk_column_indices(const BasicTensor<T>& x, std::size_t k) {
  require_rank(x.shape(), 2, "topk_columns");
  const std::size_t s = x.rows();
  const std::size_t h = x.cols();
  if (k > s) {
    throw ParameterError("topk_columns: K=" + std::to_string(k) + " exceeds row count " + std::to_string(s));
  }
  BasicTensor<std::size_t> idx({k, h});
  std::vector<std::size_t> order(s);
  for (std::size_t j = 0; j < h; ++j) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const T va = x(a, j);
                        const T vb = x(b, j);
                        return va > vb || (va == vb && a < b);
                      });
    for (std::size_t i = 0; i < k; ++i) idx(i, j) = order[i];
  }
  return idx;
}

template <class T>
BasicTensor<T> topk_columns(const BasicTensor<T>& x, std::size_t k) {
  const auto idx = topk_column_indices(x, k);
  BasicTensor<T> out({k, x.cols()});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(idx(i, j), j);
  return out;
}

}  // namespace qattack
