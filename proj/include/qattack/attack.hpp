// SPDX-License-Identifier: Apache-2.0
//
// Availability attack against dynamic mixed-precision inference.
//
// The perturbation is optimized by signed-gradient PGD under an L-inf bound
// to minimize
//
//   L = l1 * L_quant + l2 * L_acc + l3 * L_tv
//
//   L_quant: for every captured quantized-layer input X (s x h), the top-K
//            entries of each column are pulled up towards x_target with the
//            one-sided penalty max(x_target - v, 0)^2 / (K*h); entries already
//            at or above the target cost nothing.
//   L_acc:   mean squared difference between perturbed and clean logits.
//   L_tv:    smoothed isotropic total variation of the perturbation.
//
// Every term vanishes exactly when the attack has succeeded, so PGD steps
// against the gradient: delta <- clip(delta - alpha * sign(grad)).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qattack/autograd.hpp"
#include "qattack/binary_io.hpp"
#include "qattack/dataset.hpp"
#include "qattack/rng.hpp"
#include "qattack/vit.hpp"

namespace qattack {

enum class AttackVariant : std::uint32_t { single = 0, class_universal = 1, universal = 2 };

inline const char* variant_name(AttackVariant v) {
  switch (v) {
    case AttackVariant::single:
      return "single";
    case AttackVariant::class_universal:
      return "class-universal";
    case AttackVariant::universal:
      return "universal";
  }
  return "?";
}

inline AttackVariant parse_variant(const std::string& s) {
  if (s == "single") return AttackVariant::single;
  if (s == "class-universal" || s == "class_universal") return AttackVariant::class_universal;
  if (s == "universal") return AttackVariant::universal;
  throw ParameterError("unknown attack variant \"" + s + "\"");
}

struct AttackConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.01;
  double lambda3 = 50.0;
  float epsilon = 0.8f;
  double alpha_max = 0.02;
  double alpha_min = 1e-5;
  std::size_t restart_period = 100;
  std::size_t iterations = 300;
  std::size_t top_k = 4;
  float x_target = 70.0f;
  AttackVariant variant = AttackVariant::single;
  int target_class = -1;  // class-universal only
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;  // universal variants

  /// Defaults for universal variants use a longer schedule.
  static AttackConfig universal_defaults() {
    AttackConfig c;
    c.variant = AttackVariant::universal;
    c.iterations = 1000;
    return c;
  }

  void validate(const QuantThreshold& threshold) const {
    if (!(epsilon > 0.0f)) throw ParameterError("attack: epsilon must be > 0");
    if (!(alpha_min <= alpha_max) || alpha_min < 0.0) throw ParameterError("attack: need 0 <= alpha_min <= alpha_max");
    if (top_k < 1) throw ParameterError("attack: K must be >= 1");
    if (!(x_target > threshold.tau)) throw ParameterError("attack: x_target must exceed tau");
    if (restart_period == 0) throw ParameterError("attack: restart period must be positive");
    if (batch_size == 0) throw ParameterError("attack: batch size must be positive");
    if (variant == AttackVariant::class_universal && target_class < 0) {
      throw ParameterError("attack: class-universal variant needs a target class");
    }
  }
};

struct Perturbation {
  Tensor delta;  // C x H x W
  float epsilon = 0.0f;
  AttackVariant variant = AttackVariant::single;
  int target_class = -1;
};

/// The image set D' the perturbation is optimized over.
struct AttackScope {
  std::vector<Tensor> images;  // each C x H x W
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }

  void validate(const AttackConfig& cfg) const {
    if (images.empty()) throw ParameterError("attack scope is empty");
    if (labels.size() != images.size()) throw ShapeError("attack scope: label count != image count");
    for (const auto& im : images) {
      if (im.shape() != images.front().shape()) throw ShapeError("attack scope: image shapes differ");
    }
    if (cfg.variant == AttackVariant::single && images.size() != 1) {
      throw ParameterError("single-image attack scope must hold exactly one image");
    }
    if (cfg.variant == AttackVariant::class_universal) {
      for (int y : labels) {
        if (y != cfg.target_class) throw ParameterError("class-universal scope holds a foreign label");
      }
    }
  }

  static AttackScope single(Tensor image, int label) { return {{std::move(image)}, {label}}; }

  /// Scope for `variant` drawn from a dataset: one image (single), every
  /// image with label == target (class-universal) or everything (universal).
  static AttackScope select(const ToyDataset& data, AttackVariant variant, int target_class = -1,
                            std::size_t single_index = 0) {
    AttackScope s;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const bool take = variant == AttackVariant::single            ? i == single_index
                        : variant == AttackVariant::class_universal ? data.labels[i] == target_class
                                                                    : true;
      if (take) {
        s.images.push_back(data.image(i));
        s.labels.push_back(data.labels[i]);
      }
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Loss components
// ---------------------------------------------------------------------------

/// Sum over captured layers of the one-sided top-K penalty.
template <class T>
ag::Var<T> quant_loss(std::span<const ag::Var<T>> captures, std::size_t k, T x_target) {
  if (captures.empty()) throw ParameterError("quant_loss: no captured layers");
  std::optional<ag::Var<T>> total;
  for (const auto& x : captures) {
    const std::size_t h = x.value().cols();
    auto top = ag::topk_columns(x, k);
    // max(x_target - v, 0)
    auto gap = ag::maximum(ag::add_scalar(ag::scale(top, T{-1}), x_target), T{0});
    auto layer = ag::scale(ag::sum(ag::square(gap)), T{1} / static_cast<T>(k * h));
    total = total ? ag::add(*total, layer) : layer;
  }
  return *total;
}

inline double quant_loss(const CaptureBuffer& captures, std::size_t k, float x_target) {
  ag::Tape<float> tape;
  std::vector<ag::Var<float>> vars;
  for (const auto& s : captures.states) vars.push_back(tape.constant(s));
  return quant_loss<float>(vars, k, x_target).value().item();
}

/// (1/M) * sum_m (adv_m - clean_m)^2; the clean logits are constants.
template <class T>
ag::Var<T> class_loss(ag::Var<T> adv_logits, const BasicTensor<T>& clean_logits) {
  if (adv_logits.value().size() != clean_logits.size()) throw ShapeError("class_loss: logit counts differ");
  auto clean = adv_logits.tape->constant(clean_logits.reshaped(adv_logits.shape()));
  return ag::mean(ag::square(ag::sub(adv_logits, clean)));
}

inline double class_loss(const Tensor& adv_logits, const Tensor& clean_logits) {
  ag::Tape<float> tape;
  return class_loss<float>(tape.constant(adv_logits), clean_logits).value().item();
}

inline constexpr double kTvSmoothing = 1e-8;

/// Smoothed total variation of a C x H x W tensor over all (i, j) with
/// i < H-1 and j < W-1, offset so that a constant tensor scores zero.
template <class T>
ag::Var<T> tv_loss(ag::Var<T> delta) {
  require_rank(delta.shape(), 3, "tv_loss");
  const std::size_t C = delta.shape()[0], H = delta.shape()[1], W = delta.shape()[2];
  if (H < 2 || W < 2) throw ShapeError("tv_loss: needs at least 2x2 pixels");
  const Shape ext{C, H - 1, W - 1};
  auto base = ag::crop(delta, {0, 0, 0}, ext);
  auto down = ag::sub(ag::crop(delta, {0, 1, 0}, ext), base);
  auto right = ag::sub(ag::crop(delta, {0, 0, 1}, ext), base);
  const T eps = static_cast<T>(kTvSmoothing);
  auto mag = ag::sqrt_smooth(ag::add(ag::square(down), ag::square(right)), eps);
  const T offset = static_cast<T>(shape_size(ext)) * std::sqrt(eps);
  return ag::add_scalar(ag::sum(mag), -offset);
}

inline double tv_loss(const Tensor& delta) {
  ag::Tape<float> tape;
  return tv_loss<float>(tape.constant(delta)).value().item();
}

struct LossBreakdown {
  double quant = 0.0;
  double acc = 0.0;
  double tv = 0.0;
  double total = 0.0;
};

template <class T>
struct TotalLossGraph {
  ag::Var<T> total;
  LossBreakdown parts;
  std::vector<MatmulTrace> traces;
  std::vector<int> predicted;  // class of the perturbed image
};

/// Records L for one image: forward on clamp(x + delta) with capture
/// enabled, then the weighted sum of the three components. Components with
/// a zero weight are left out of the graph entirely.
template <class T>
TotalLossGraph<T> total_loss(const ViTModel& model, const BasicTensor<T>& image, ag::Var<T> delta,
                             const BasicTensor<T>& clean_logits, const AttackConfig& cfg,
                             const ForwardOptions& base_opts = {}) {
  ag::Tape<T>& tape = *delta.tape;
  if (image.shape() != delta.shape()) throw ShapeError("total_loss: image and perturbation shapes differ");
  const Shape& s = image.shape();
  auto x = tape.constant(image);
  auto adv = ag::clamp(ag::add(x, delta), T{0}, T{1});
  auto batch = ag::reshape(adv, {1, s[0], s[1], s[2]});

  ForwardOptions opts = base_opts;
  opts.capture = true;
  TotalLossGraph<T> out;
  const auto params = bind_params<T>(tape, model, false);
  auto fwd = forward_graph<T>(model, params, batch, opts, &out.traces);
  {
    const auto& lg = fwd.logits.value();
    std::size_t best = 0;
    for (std::size_t c = 1; c < lg.size(); ++c)
      if (lg[c] > lg[best]) best = c;
    out.predicted.push_back(static_cast<int>(best));
  }

  std::optional<ag::Var<T>> total;
  auto accumulate = [&](ag::Var<T> term, double weight) {
    auto w = ag::scale(term, static_cast<T>(weight));
    total = total ? ag::add(*total, w) : w;
  };
  auto lq = quant_loss<T>(fwd.captures, cfg.top_k, static_cast<T>(cfg.x_target));
  out.parts.quant = static_cast<double>(lq.value().item());
  if (cfg.lambda1 != 0.0) accumulate(lq, cfg.lambda1);
  auto la = class_loss<T>(fwd.logits, clean_logits);
  out.parts.acc = static_cast<double>(la.value().item());
  if (cfg.lambda2 != 0.0) accumulate(la, cfg.lambda2);
  auto lt = tv_loss<T>(delta);
  out.parts.tv = static_cast<double>(lt.value().item());
  if (cfg.lambda3 != 0.0) accumulate(lt, cfg.lambda3);
  if (!total) total = ag::scale(lq, T{0});
  out.total = *total;
  out.parts.total = static_cast<double>(out.total.value().item());
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Cosine annealing within one cycle, t_cur in [0, period].
inline double cosine_annealing(double t_cur, double period, double alpha_max, double alpha_min) {
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * t_cur / period));
  return w * alpha_max + (1.0 - w) * alpha_min;
}

/// Step size at iteration t with warm restarts every restart_period steps.
inline double cosine_wr_step(std::size_t t, const AttackConfig& cfg) {
  const std::size_t t_cur = t % cfg.restart_period;
  return cosine_annealing(static_cast<double>(t_cur), static_cast<double>(cfg.restart_period), cfg.alpha_max,
                          cfg.alpha_min);
}

/// delta' = clip(delta - alpha * sign(grad), -eps, eps); with `image` also
/// keeps image + delta' inside [0, 1] (evaluated in float).
inline Tensor pgd_update(const Tensor& delta, const Tensor& grad, double alpha, float epsilon,
                         const Tensor* image = nullptr) {
  if (delta.shape() != grad.shape()) throw ShapeError("pgd_update: gradient shape mismatch");
  if (image && image->shape() != delta.shape()) throw ShapeError("pgd_update: image shape mismatch");
  Tensor out = delta;
  const auto a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float g = grad[i];
    const float sgn = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
    float d = std::clamp(out[i] - a * sgn, -epsilon, epsilon);
    if (image) {
      const float x = (*image)[i];
      if (x + d > 1.0f) {
        d = 1.0f - x;
        while (x + d > 1.0f) d = std::nextafter(d, -2.0f);
      } else if (x + d < 0.0f) {
        d = -x;
        while (x + d < 0.0f) d = std::nextafter(d, 2.0f);
      }
      d = std::clamp(d, -epsilon, epsilon);
    }
    out[i] = d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attack loop
// ---------------------------------------------------------------------------

struct IterationRecord {
  std::size_t iteration = 0;
  double alpha = 0.0;
  LossBreakdown loss;            // summed over the iteration's batch
  std::size_t outlier_count = 0;  // outlier columns over the batch's forwards
  float max_abs_delta = 0.0f;     // after the update
  std::size_t model_index = 0;
};

struct AttackResult {
  Perturbation perturbation;
  std::vector<IterationRecord> history;
};

/// Total outlier columns across a set of traces.
inline std::size_t total_outliers(std::span<const MatmulTrace> traces) {
  std::size_t n = 0;
  for (const auto& t : traces) n += t.outlier_count();
  return n;
}

inline float max_abs(const Tensor& t) {
  float m = 0.0f;
  for (float v : t.data()) m = std::max(m, std::fabs(v));
  return m;
}

/// Throws InvariantError unless |delta| <= eps and, for per-image
/// perturbations, image + delta stays in [0, 1].
inline void check_perturbation_invariants(const Tensor& delta, float epsilon, const AttackScope& scope,
                                          bool per_image_bounds) {
  if (max_abs(delta) > epsilon) throw InvariantError("attack: perturbation left the epsilon ball");
  if (!per_image_bounds) return;
  for (const auto& im : scope.images) {
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const float v = im[i] + delta[i];
      if (v < 0.0f || v > 1.0f) throw InvariantError("attack: perturbed pixel outside [0, 1]");
    }
  }
}

/// Runs the attack for cfg.iterations steps. With several models one of them
/// is drawn uniformly (seeded) per iteration.
///
/// The single variant projects delta so that x + delta stays in [0, 1]. The
/// universal variants share delta across images, so they only project onto
/// the epsilon ball and rely on the clamp inside the forward pass.
inline AttackResult run_attack(std::span<const ViTModel* const> models, const AttackScope& scope,
                               const AttackConfig& cfg, const ForwardOptions& base_opts = {}) {
  if (models.empty()) throw ParameterError("run_attack: no models");
  scope.validate(cfg);
  const ViTConfig& mc = models.front()->config();
  for (const ViTModel* m : models) {
    const ViTConfig& c = m->config();
    if (c.channels != mc.channels || c.image_size != mc.image_size) {
      throw ShapeError("run_attack: models disagree on input shape");
    }
    cfg.validate(base_opts.threshold.value_or(c.threshold));
  }
  const Shape& img_shape = scope.images.front().shape();
  if (img_shape != Shape{mc.channels, mc.image_size, mc.image_size}) {
    throw ShapeError("run_attack: scope images do not match the model input");
  }

  // Clean logits per (model, image), constants of L_acc.
  std::vector<std::vector<Tensor>> clean(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (const auto& im : scope.images) {
      const auto out = forward(*models[m], im.reshaped({1, img_shape[0], img_shape[1], img_shape[2]}), base_opts);
      clean[m].push_back(out.logits);
    }
  }

  const bool per_image_bounds = cfg.variant == AttackVariant::single;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(scope.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  AttackResult result;
  Tensor delta(img_shape);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    IterationRecord rec;
    rec.iteration = t;
    rec.alpha = cosine_wr_step(t, cfg);
    rec.model_index = models.size() > 1 ? rng.index(models.size()) : 0;
    const ViTModel& model = *models[rec.model_index];

    std::vector<std::size_t> batch;
    if (scope.size() <= cfg.batch_size) {
      batch = order;
    } else {
      for (std::size_t k = 0; k < cfg.batch_size; ++k) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(order[cursor++]);
      }
    }

    Tensor grad(img_shape);
    for (std::size_t idx : batch) {
      ag::Tape<float> tape;
      auto d = tape.variable(delta);
      auto g = total_loss<float>(model, scope.images[idx], d, clean[rec.model_index][idx], cfg, base_opts);
      tape.backward(g.total);
      const auto& gd = tape.grad(d);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += gd[i];
      rec.loss.quant += g.parts.quant;
      rec.loss.acc += g.parts.acc;
      rec.loss.tv += g.parts.tv;
      rec.loss.total += g.parts.total;
      rec.outlier_count += total_outliers(g.traces);
    }

    const Tensor* bound = per_image_bounds ? &scope.images.front() : nullptr;
    delta = pgd_update(delta, grad, rec.alpha, cfg.epsilon, bound);
    check_perturbation_invariants(delta, cfg.epsilon, scope, per_image_bounds);
    rec.max_abs_delta = max_abs(delta);
    result.history.push_back(rec);
  }
  result.perturbation = Perturbation{std::move(delta), cfg.epsilon, cfg.variant, cfg.target_class};
  return result;
}

inline AttackResult run_attack(const ViTModel& model, const AttackScope& scope, const AttackConfig& cfg,
                               const ForwardOptions& base_opts = {}) {
  const ViTModel* ptr = &model;
  return run_attack(std::span<const ViTModel* const>(&ptr, 1), scope, cfg, base_opts);
}

/// x + delta clamped to the pixel range.
inline Tensor apply_perturbation(const Tensor& image, const Tensor& delta) {
  if (image.shape() != delta.shape()) throw ShapeError("apply_perturbation: shape mismatch");
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(image[i] + delta[i], 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation file: "QTVP", u32 version, u32 C/H/W, f32 eps,
// u32 variant, i32 target class, delta (f32 LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kPerturbationFileVersion = 1;

inline void save_perturbation(const Perturbation& p, const std::string& path) {
  require_rank(p.delta.shape(), 3, "save_perturbation");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_perturbation: cannot open " + path);
  io::write_magic(os, "QTVP");
  io::write_u32(os, kPerturbationFileVersion);
  for (std::size_t d : p.delta.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
  io::write_f32(os, p.epsilon);
  io::write_u32(os, static_cast<std::uint32_t>(p.variant));
  io::write_i32(os, p.target_class);
  io::write_f32s(os, p.delta.data());
  if (!os) throw Error("save_perturbation: write failed for " + path);
}

inline Perturbation load_perturbation(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_perturbation: cannot open " + path);
  io::Reader rd(is, "perturbation file " + path);
  rd.expect_magic("QTVP");
  const std::uint32_t version = rd.u32();
  if (version != kPerturbationFileVersion) {
    throw VersionError("perturbation file " + path + ": unsupported version " + std::to_string(version));
  }
  Shape shape(3);
  for (auto& d : shape) d = rd.u32();
  if (shape_size(shape) > (std::size_t{1} << 28)) throw FormatError("perturbation file " + path + ": absurd shape");
  Perturbation p;
  p.epsilon = rd.f32();
  const std::uint32_t tag = rd.u32();
  if (tag > 2) throw FormatError("perturbation file " + path + ": unknown variant tag");
  p.variant = static_cast<AttackVariant>(tag);
  p.target_class = rd.i32();
  p.delta = Tensor(shape);
  rd.f32s(p.delta.data());
  if (!rd.at_end()) throw FormatError("perturbation file " + path + ": trailing bytes");
  return p;
}

}  // namespace qattack
