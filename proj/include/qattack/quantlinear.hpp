// SPDX-License-Identifier: Apache-2.0
//
// Dynamic int8/f16 mixed-precision linear layer.
//
// Each call inspects the incoming hidden state X (s x h) and routes every
// feature column that carries an outlier (|x| > tau) through an emulated
// binary16 product; all remaining columns go through absmax int8 with int32
// accumulation. The number of routed columns is therefore input dependent,
// which is exactly the surface the attack inflates.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qattack/tensor.hpp"

namespace qattack {

enum class OutlierTest {
  magnitude,   // max_r |X[r,i]| > tau
  signed_max,  // max_r X[r,i] > tau, the literal pseudocode form
};

struct QuantThreshold {
  float tau = 6.0f;
  OutlierTest test = OutlierTest::magnitude;

  void validate() const {
    if (std::isnan(tau)) throw ParameterError("quant threshold tau must not be NaN");
  }
};

struct OutlierPolicy {
  enum class Mode { unlimited, capped };
  Mode mode = Mode::unlimited;
  std::size_t cap = 0;

  static OutlierPolicy unlimited() { return {}; }
  static OutlierPolicy capped(std::size_t cap) { return {Mode::capped, cap}; }

  bool is_capped() const { return mode == Mode::capped; }
};

/// Sorted, duplicate-free column indices.
using ColumnSet = std::vector<std::size_t>;

struct MatmulTrace {
  std::string layer_id;
  ColumnSet outlier_columns;
  std::size_t s_rows = 0;
  std::size_t h = 0;
  std::size_t o = 0;
  std::uint64_t f16_macs = 0;
  std::uint64_t int8_macs = 0;
  std::uint64_t bytes_moved = 0;

  std::size_t outlier_count() const { return outlier_columns.size(); }
};

/// Byte accounting for one mixed matmul: 1 byte per int8 operand element,
/// 2 bytes per f16 operand element, 2 bytes per output element.
inline std::uint64_t matmul_bytes(std::size_t s, std::size_t h, std::size_t o, std::size_t outliers) {
  const std::uint64_t n_int8 = h - outliers;
  const std::uint64_t n_f16 = outliers;
  return 1 * (s * n_int8 + n_int8 * o) + 2 * (s * n_f16 + n_f16 * o) + 2 * std::uint64_t{s} * o;
}

inline MatmulTrace make_trace(std::string layer_id, ColumnSet outliers, std::size_t s, std::size_t h,
                              std::size_t o) {
  MatmulTrace t;
  t.layer_id = std::move(layer_id);
  const std::size_t n = outliers.size();
  t.outlier_columns = std::move(outliers);
  t.s_rows = s;
  t.h = h;
  t.o = o;
  t.f16_macs = std::uint64_t{s} * n * o;
  t.int8_macs = std::uint64_t{s} * (h - n) * o;
  t.bytes_moved = matmul_bytes(s, h, o, n);
  return t;
}

/// Columns of X holding at least one outlier under the threshold rule.
inline ColumnSet extract_outliers(const Tensor& x, const QuantThreshold& threshold) {
  require_rank(x.shape(), 2, "extract_outliers");
  const std::size_t s = x.rows();
  const std::size_t h = x.cols();
  std::vector<char> hit(h, 0);
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < h; ++c) {
      const float v = threshold.test == OutlierTest::magnitude ? std::fabs(x(r, c)) : x(r, c);
      if (v > threshold.tau) hit[c] = 1;
    }
  }
  ColumnSet out;
  for (std::size_t c = 0; c < h; ++c)
    if (hit[c]) out.push_back(c);
  return out;
}

/// Applies the outlier cap: keeps the `cap` columns with the largest
/// per-column max-magnitude, lower index first on ties.
inline ColumnSet apply_policy(ColumnSet outliers, const OutlierPolicy& policy, const Tensor& x) {
  if (!policy.is_capped()) return outliers;
  require_rank(x.shape(), 2, "apply_policy");
  const std::size_t cap = std::min(policy.cap, x.cols());
  if (outliers.size() <= cap) return outliers;

  std::vector<std::pair<float, std::size_t>> ranked;
  ranked.reserve(outliers.size());
  for (std::size_t c : outliers) {
    if (c >= x.cols()) throw ParameterError("apply_policy: outlier column out of range");
    float m = 0.0f;
    for (std::size_t r = 0; r < x.rows(); ++r) m = std::max(m, std::fabs(x(r, c)));
    ranked.emplace_back(m, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  ColumnSet kept;
  kept.reserve(cap);
  for (std::size_t i = 0; i < cap; ++i) kept.push_back(ranked[i].second);
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// Linear layer y = X·W + b with a column-wise int8 copy of W kept in sync.
class QuantLinearLayer {
 public:
  QuantLinearLayer() = default;

  QuantLinearLayer(std::string layer_id, Tensor weights, std::optional<Tensor> bias = std::nullopt)
      : layer_id_(std::move(layer_id)) {
    set_weights(std::move(weights), std::move(bias));
  }

  void set_weights(Tensor weights, std::optional<Tensor> bias = std::nullopt) {
    require_rank(weights.shape(), 2, "QuantLinearLayer weights");
    if (bias && bias->size() != weights.cols()) {
      throw ShapeError("QuantLinearLayer bias length " + std::to_string(bias->size()) +
                       " != output width " + std::to_string(weights.cols()));
    }
    weights_ = std::move(weights);
    bias_ = std::move(bias);
    qweights_ = absmax_quantize(weights_, QuantAxis::column_wise);
    half_weights_ = round_to_half(weights_);
  }

  const std::string& layer_id() const { return layer_id_; }
  const Tensor& weights() const { return weights_; }
  const QuantizedMatrix& cached_qweights() const { return qweights_; }
  const Tensor& half_weights() const { return half_weights_; }
  const std::optional<Tensor>& bias() const { return bias_; }
  std::size_t in_features() const { return weights_.rows(); }
  std::size_t out_features() const { return weights_.cols(); }

 private:
  std::string layer_id_;
  Tensor weights_;
  std::optional<Tensor> bias_;
  QuantizedMatrix qweights_;
  Tensor half_weights_;
};

struct MixedMatmulResult {
  Tensor output;
  MatmulTrace trace;
};

/// Mixed-precision product of X with the layer weights. Outlier columns use
/// binary16-rounded operands and a binary16-rounded result; the rest use
/// row-wise int8 X against the cached column-wise int8 weights.
inline MixedMatmulResult mixed_matmul(const Tensor& x, const QuantLinearLayer& layer,
                                      const QuantThreshold& threshold, const OutlierPolicy& policy) {
  require_rank(x.shape(), 2, "mixed_matmul");
  threshold.validate();
  const std::size_t s = x.rows();
  const std::size_t h = x.cols();
  const std::size_t o = layer.out_features();
  if (h != layer.in_features()) {
    throw ShapeError("mixed_matmul: input width " + std::to_string(h) + " != layer rows " +
                     std::to_string(layer.in_features()) + " (" + layer.layer_id() + ")");
  }

  ColumnSet outliers = apply_policy(extract_outliers(x, threshold), policy, x);
  std::vector<char> is_outlier(h, 0);
  for (std::size_t c : outliers) is_outlier[c] = 1;
  std::vector<std::size_t> regular;
  regular.reserve(h - outliers.size());
  for (std::size_t c = 0; c < h; ++c)
    if (!is_outlier[c]) regular.push_back(c);

  Tensor out({s, o});

  // f16 segment
  if (!outliers.empty()) {
    const Tensor& wh = layer.half_weights();
    std::vector<float> acc(o);
    for (std::size_t r = 0; r < s; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0f);
      for (std::size_t c : outliers) {
        const float xv = round_to_half(x(r, c));
        if (xv == 0.0f) continue;
        const float* wrow = &wh(c, 0);
        for (std::size_t j = 0; j < o; ++j) acc[j] += xv * wrow[j];
      }
      for (std::size_t j = 0; j < o; ++j) out(r, j) = round_to_half(acc[j]);
    }
  }

  // int8 segment
  if (!regular.empty()) {
    Tensor xs({s, regular.size()});
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t k = 0; k < regular.size(); ++k) xs(r, k) = x(r, regular[k]);
    const QuantizedMatrix xq = absmax_quantize(xs, QuantAxis::row_wise);
    const QuantizedMatrix& wq = layer.cached_qweights();

    BasicTensor<std::int32_t> prod({s, o});
    for (std::size_t r = 0; r < s; ++r) {
      std::int32_t* prow = &prod(r, 0);
      for (std::size_t k = 0; k < regular.size(); ++k) {
        const std::int32_t qv = xq.values(r, k);
        if (qv == 0) continue;
        const std::int8_t* wrow = &wq.values(regular[k], 0);
        for (std::size_t j = 0; j < o; ++j) prow[j] += qv * static_cast<std::int32_t>(wrow[j]);
      }
    }
    const Tensor deq = dequantize_product(prod, xq.scales, wq.scales);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += deq[i];
  }

  if (const auto& b = layer.bias()) {
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t j = 0; j < o; ++j) out(r, j) += (*b)[j];
  }

  return {std::move(out), make_trace(layer.layer_id(), std::move(outliers), s, h, o)};
}

/// B x s x h -> (B*s) x h; image b occupies rows [b*s, (b+1)*s).
inline Tensor batch_flatten(const Tensor& x) {
  require_rank(x.shape(), 3, "batch_flatten");
  return x.reshaped({x.dim(0) * x.dim(1), x.dim(2)});
}

inline Tensor batch_unflatten(const Tensor& x, std::size_t batch) {
  require_rank(x.shape(), 2, "batch_unflatten");
  if (batch == 0 || x.rows() % batch != 0) {
    throw ShapeError("batch_unflatten: " + std::to_string(x.rows()) + " rows not divisible by batch " +
                     std::to_string(batch));
  }
  return x.reshaped({batch, x.rows() / batch, x.cols()});
}

}  // namespace qattack
