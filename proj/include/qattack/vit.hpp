// SPDX-License-Identifier: Apache-2.0
//
// Toy vision transformer whose block projections run through the dynamic
// mixed-precision linear layer.
//
//   patches -> linear embed -> [cls; tokens] + pos
//   L x { x += proj(attn(qkv(LN(x)))) ; x += fc2(gelu(fc1(LN(x)))) }
//   LN -> head(cls)
//
// qkv, proj, fc1 and fc2 are quantized (4 per block); the patch embedding
// and the classifier head stay in full precision.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qattack/autograd.hpp"
#include "qattack/binary_io.hpp"
#include "qattack/dataset.hpp"
#include "qattack/quantlinear.hpp"
#include "qattack/rng.hpp"
#include "qattack/tensor.hpp"

namespace qattack {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t hidden_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t num_classes = 10;
  QuantThreshold threshold{};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  std::size_t quantized_layer_count() const { return 4 * num_layers; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw ParameterError("ViTConfig: image_size must be divisible by patch_size");
    }
    if (num_heads == 0 || hidden_dim % num_heads != 0) {
      throw ParameterError("ViTConfig: hidden_dim must be divisible by num_heads");
    }
    if (num_classes < 2) throw ParameterError("ViTConfig: num_classes must be >= 2");
    if (channels == 0 || hidden_dim == 0 || mlp_dim == 0 || num_layers == 0) {
      throw ParameterError("ViTConfig: dimensions must be positive");
    }
    threshold.validate();
  }
};

enum class QuantSlot : std::size_t { qkv = 0, proj = 1, fc1 = 2, fc2 = 3 };

/// Parameters in canonical (file) order plus the int8 caches derived from
/// the quantized projection weights.
class ViTModel {
 public:
  static constexpr std::size_t kHeadParams = 4;   // patch_w, patch_b, cls, pos
  static constexpr std::size_t kBlockParams = 12;
  static constexpr std::size_t kTailParams = 4;   // ln_g, ln_b, head_w, head_b

  // Offsets inside one block.
  enum BlockParam : std::size_t {
    ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b
  };

  explicit ViTModel(ViTConfig config) : config_(config) {
    config_.validate();
    const std::size_t h = config_.hidden_dim;
    const std::size_t m = config_.mlp_dim;
    add("patch.w", {config_.patch_dim(), h});
    add("patch.b", {h});
    add("cls", {1, h});
    add("pos", {config_.seq_len(), h});
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      add(p + "ln1.g", {h}, 1.0f);
      add(p + "ln1.b", {h});
      add(p + "qkv.w", {h, 3 * h});
      add(p + "qkv.b", {3 * h});
      add(p + "proj.w", {h, h});
      add(p + "proj.b", {h});
      add(p + "ln2.g", {h}, 1.0f);
      add(p + "ln2.b", {h});
      add(p + "fc1.w", {h, m});
      add(p + "fc1.b", {m});
      add(p + "fc2.w", {m, h});
      add(p + "fc2.b", {h});
    }
    add("ln.g", {h}, 1.0f);
    add("ln.b", {h});
    add("head.w", {h, config_.num_classes});
    add("head.b", {config_.num_classes});
    sync();
  }

  const ViTConfig& config() const { return config_; }
  void set_threshold(QuantThreshold t) {
    t.validate();
    config_.threshold = t;
  }

  std::size_t param_count() const { return params_.size(); }
  const std::vector<Tensor>& params() const { return params_; }
  const Tensor& param(std::size_t i) const { return params_.at(i); }
  const std::string& param_name(std::size_t i) const { return names_.at(i); }

  /// Replaces a parameter; call sync() afterwards to refresh the int8 caches.
  void set_param(std::size_t i, Tensor value) {
    if (value.shape() != params_.at(i).shape()) {
      throw ShapeError("set_param " + names_[i] + ": shape " + shape_string(value.shape()) + " expected " +
                       shape_string(params_[i].shape()));
    }
    params_[i] = std::move(value);
  }
  std::span<float> param_data(std::size_t i) { return params_.at(i).data(); }

  static std::size_t block_param(std::size_t block, BlockParam which) {
    return kHeadParams + block * kBlockParams + which;
  }
  std::size_t tail_param(std::size_t k) const {
    return kHeadParams + config_.num_layers * kBlockParams + k;
  }

  const QuantLinearLayer& quant_layer(std::size_t block, QuantSlot slot) const {
    return qlayers_.at(block * 4 + static_cast<std::size_t>(slot));
  }

  /// Rebuilds every quantized layer from the current master weights.
  void sync() {
    qlayers_.clear();
    static constexpr std::array<std::pair<const char*, BlockParam>, 4> slots{{
        {"qkv", qkv_w}, {"proj", proj_w}, {"fc1", fc1_w}, {"fc2", fc2_w}}};
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      for (const auto& [name, w] : slots) {
        const std::size_t wi = block_param(l, w);
        qlayers_.emplace_back("block" + std::to_string(l) + "." + name, params_[wi], params_[wi + 1]);
      }
    }
  }

 private:
  void add(std::string name, Shape shape, float fill = 0.0f) {
    names_.push_back(std::move(name));
    params_.emplace_back(std::move(shape), fill);
  }

  ViTConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<QuantLinearLayer> qlayers_;
};

/// Hidden states entering each quantized layer, in execution order.
struct CaptureBuffer {
  std::vector<std::string> layer_ids;
  std::vector<Tensor> states;

  std::size_t size() const { return states.size(); }
};

struct ForwardOptions {
  bool quantized = true;
  OutlierPolicy policy{};
  std::optional<QuantThreshold> threshold;  // defaults to the model's
  bool capture = false;
};

template <class T>
struct GraphForward {
  ag::Var<T> logits;
  std::vector<ag::Var<T>> captures;  // filled when options.capture is set
  std::vector<std::string> capture_ids;
};

/// Puts the model parameters on a tape, as differentiable leaves when
/// `trainable`, otherwise as constants.
template <class T>
std::vector<ag::Var<T>> bind_params(ag::Tape<T>& tape, const ViTModel& model, bool trainable) {
  std::vector<ag::Var<T>> out;
  out.reserve(model.param_count());
  for (const auto& p : model.params()) {
    BasicTensor<T> v = [&] {
      if constexpr (std::is_same_v<T, float>) {
        return p;
      } else {
        return p.template cast<T>();
      }
    }();
    out.push_back(trainable ? tape.variable(std::move(v)) : tape.constant(std::move(v)));
  }
  return out;
}

/// Records the forward pass for a B x C x H x W image batch. Every quantized
/// layer sees the batch stacked to (B*s) x h.
template <class T>
GraphForward<T> forward_graph(const ViTModel& model, std::span<const ag::Var<T>> params, ag::Var<T> images,
                              const ForwardOptions& opts, std::vector<MatmulTrace>* traces = nullptr) {
  using namespace ag;
  const ViTConfig& cfg = model.config();
  const Shape& is = images.shape();
  require_rank(is, 4, "vit forward images");
  if (is[1] != cfg.channels || is[2] != cfg.image_size || is[3] != cfg.image_size) {
    throw ShapeError("vit forward: image batch " + shape_string(is) + " does not match config");
  }
  if (params.size() != model.param_count()) throw ShapeError("vit forward: parameter count mismatch");

  const std::size_t B = is[0];
  const std::size_t s = cfg.seq_len();
  const std::size_t h = cfg.hidden_dim;
  const std::size_t d = cfg.head_dim();
  const std::size_t np = cfg.num_patches();
  const T attn_scale = T{1} / std::sqrt(static_cast<T>(d));

  LinearExec exec;
  exec.quantized = opts.quantized;
  exec.threshold = opts.threshold.value_or(cfg.threshold);
  exec.policy = opts.policy;
  exec.traces = traces;

  GraphForward<T> out;
  auto qlinear = [&](Var<T> x, std::size_t block, QuantSlot slot, ViTModel::BlockParam w) {
    const QuantLinearLayer& layer = model.quant_layer(block, slot);
    if (opts.capture) {
      out.captures.push_back(x);
      out.capture_ids.push_back(layer.layer_id());
    }
    const std::size_t wi = ViTModel::block_param(block, w);
    return quant_linear(x, params[wi], params[wi + 1], layer, exec);
  };
  auto P = [&](std::size_t block, ViTModel::BlockParam which) { return params[ViTModel::block_param(block, which)]; };

  Var<T> patches = extract_patches(images, cfg.patch_size);
  Var<T> emb = add_broadcast(matmul(patches, params[0]), params[1]);
  std::vector<Var<T>> seqs;
  for (std::size_t b = 0; b < B; ++b) {
    seqs.push_back(params[2]);
    seqs.push_back(slice_rows(emb, b * np, (b + 1) * np));
  }
  Var<T> x = add_broadcast(concat(seqs, 0), params[3]);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    Var<T> a = layer_norm(x, P(l, ViTModel::ln1_g), P(l, ViTModel::ln1_b));
    Var<T> qkv = qlinear(a, l, QuantSlot::qkv, ViTModel::qkv_w);
    std::vector<Var<T>> per_image;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<Var<T>> heads;
      for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
        Var<T> q = crop(qkv, {b * s, hd * d}, {s, d});
        Var<T> k = crop(qkv, {b * s, h + hd * d}, {s, d});
        Var<T> v = crop(qkv, {b * s, 2 * h + hd * d}, {s, d});
        Var<T> att = softmax_rows(scale(matmul(q, transpose(k)), attn_scale));
        heads.push_back(matmul(att, v));
      }
      per_image.push_back(concat(heads, 1));
    }
    Var<T> attn = per_image.size() == 1 ? per_image[0] : concat(per_image, 0);
    x = add(x, qlinear(attn, l, QuantSlot::proj, ViTModel::proj_w));

    Var<T> m = layer_norm(x, P(l, ViTModel::ln2_g), P(l, ViTModel::ln2_b));
    Var<T> f = gelu(qlinear(m, l, QuantSlot::fc1, ViTModel::fc1_w));
    x = add(x, qlinear(f, l, QuantSlot::fc2, ViTModel::fc2_w));
  }

  x = layer_norm(x, params[model.tail_param(0)], params[model.tail_param(1)]);
  std::vector<Var<T>> cls_rows;
  for (std::size_t b = 0; b < B; ++b) cls_rows.push_back(slice_rows(x, b * s, b * s + 1));
  Var<T> cls = cls_rows.size() == 1 ? cls_rows[0] : concat(cls_rows, 0);
  out.logits = add_broadcast(matmul(cls, params[model.tail_param(2)]), params[model.tail_param(3)]);
  return out;
}

struct ForwardOutput {
  Tensor logits;  // B x M
  CaptureBuffer captures;
  std::vector<MatmulTrace> traces;
};

/// Inference-only forward pass (no differentiable leaves).
inline ForwardOutput forward(const ViTModel& model, const Tensor& images, const ForwardOptions& opts = {}) {
  ag::Tape<float> tape;
  const auto params = bind_params<float>(tape, model, false);
  ForwardOutput out;
  const auto g = forward_graph<float>(model, params, tape.constant(images), opts, &out.traces);
  out.logits = g.logits.value();
  for (std::size_t i = 0; i < g.captures.size(); ++i) {
    out.captures.layer_ids.push_back(g.capture_ids[i]);
    out.captures.states.push_back(g.captures[i].value());
  }
  return out;
}

/// Row-wise argmax, lowest index on ties.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits.shape(), 2, "argmax_rows");
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const ViTModel& model, const Tensor& images, const ForwardOptions& opts = {}) {
  return argmax_rows(forward(model, images, opts).logits);
}

/// Uniform init: linear weights in +-sqrt(3 / fan_in) * gain, embeddings in
/// +-0.1, biases zero, layer-norm gains one.
inline ViTModel init_random(const ViTConfig& config, std::uint64_t seed) {
  ViTModel model(config);
  Rng rng(seed);
  for (std::size_t i = 0; i < model.param_count(); ++i) {
    const std::string& name = model.param_name(i);
    auto data = model.param_data(i);
    const auto ends_with = [&](std::string_view suf) {
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(".w")) {
      const double fan_in = static_cast<double>(model.param(i).rows());
      const double bound = std::sqrt(3.0 / fan_in);
      for (float& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
    } else if (name == "cls" || name == "pos") {
      for (float& v : data) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
  }
  model.sync();
  return model;
}

/// Scales the hidden state entering one quantized layer by `c` without
/// changing the full-precision function: the producer of that state is
/// multiplied by `c` and the consuming projection divided by `c`. For qkv and
/// fc1 the producer is the preceding LayerNorm; for proj it is the value part
/// of qkv. fc2 consumes a GELU output and has no exact rescaling.
inline void scale_quant_input(ViTModel& model, std::size_t block, QuantSlot slot, float c) {
  if (!(c > 0.0f) || !std::isfinite(c)) throw ParameterError("scale_quant_input: factor must be positive and finite");
  if (block >= model.config().num_layers) throw ParameterError("scale_quant_input: block out of range");
  const std::size_t h = model.config().hidden_dim;
  const auto scale_all = [&](ViTModel::BlockParam p, float f) {
    for (float& v : model.param_data(ViTModel::block_param(block, p))) v *= f;
  };
  switch (slot) {
    case QuantSlot::qkv:
      scale_all(ViTModel::ln1_g, c);
      scale_all(ViTModel::ln1_b, c);
      scale_all(ViTModel::qkv_w, 1.0f / c);
      break;
    case QuantSlot::fc1:
      scale_all(ViTModel::ln2_g, c);
      scale_all(ViTModel::ln2_b, c);
      scale_all(ViTModel::fc1_w, 1.0f / c);
      break;
    case QuantSlot::proj: {
      auto w = model.param_data(ViTModel::block_param(block, ViTModel::qkv_w));
      auto b = model.param_data(ViTModel::block_param(block, ViTModel::qkv_b));
      for (std::size_t j = 2 * h; j < 3 * h; ++j) {
        for (std::size_t i = 0; i < h; ++i) w[i * 3 * h + j] *= c;
        b[j] *= c;
      }
      scale_all(ViTModel::proj_w, 1.0f / c);
      break;
    }
    case QuantSlot::fc2:
      throw ParameterError("scale_quant_input: fc2 input cannot be rescaled exactly");
  }
  model.sync();
}

/// Per-layer calibration of hidden-state scale: for every rescalable layer,
/// picks the factor at which the full-precision forward over `images`
/// yields on average `target_columns` outlier columns per image, and applies
/// it with scale_quant_input. Returns the factors in layer order (fc2 gets 1).
inline std::vector<float> calibrate_quant_inputs(ViTModel& model, const Tensor& images, double target_columns) {
  require_rank(images.shape(), 4, "calibrate_quant_inputs");
  const std::size_t n = images.dim(0);
  const std::size_t h = model.config().hidden_dim;
  if (!(target_columns > 0.0) || target_columns >= static_cast<double>(h)) {
    throw ParameterError("calibrate_quant_inputs: target_columns must be in (0, hidden_dim)");
  }
  ForwardOptions opts;
  opts.quantized = false;
  opts.capture = true;
  const auto out = forward(model, images, opts);
  const float tau = model.config().threshold.tau;
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(target_columns * static_cast<double>(n))));
  std::vector<float> factors;
  for (std::size_t li = 0; li < out.captures.size(); ++li) {
    const auto slot = static_cast<QuantSlot>(li % 4);
    if (slot == QuantSlot::fc2) {
      factors.push_back(1.0f);
      continue;
    }
    const Tensor& x = out.captures.states[li];
    const std::size_t rows = x.rows() / n;
    std::vector<float> colmax(n * h, 0.0f);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        float& m = colmax[(r / rows) * h + j];
        m = std::max(m, std::fabs(x(r, j)));
      }
    }
    std::sort(colmax.begin(), colmax.end(), std::greater<>());
    // Split between the k-th and (k+1)-th largest maxima.
    const float cut = std::sqrt(colmax[k - 1] * colmax[std::min(k, colmax.size() - 1)]);
    const float c = cut > 0.0f ? tau / cut : 1.0f;
    scale_quant_input(model, li / 4, slot, c);
    factors.push_back(c);
  }
  return factors;
}

// ---------------------------------------------------------------------------
// Weight file: "QTVW", u32 version, config integers, parameters (f32 LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kWeightFileVersion = 1;

inline void save_weights(const ViTModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_weights: cannot open " + path);
  io::write_magic(os, "QTVW");
  io::write_u32(os, kWeightFileVersion);
  const ViTConfig& c = model.config();
  for (std::size_t v : {c.image_size, c.channels, c.patch_size, c.hidden_dim, c.mlp_dim, c.num_heads,
                        c.num_layers, c.num_classes}) {
    io::write_u32(os, static_cast<std::uint32_t>(v));
  }
  for (const auto& p : model.params()) io::write_f32s(os, p.data());
  if (!os) throw Error("save_weights: write failed for " + path);
}

/// The threshold is runtime configuration and is not stored; pass the one to use.
inline ViTModel load_weights(const std::string& path, QuantThreshold threshold = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_weights: cannot open " + path);
  io::Reader rd(is, "weight file " + path);
  rd.expect_magic("QTVW");
  const std::uint32_t version = rd.u32();
  if (version != kWeightFileVersion) {
    throw VersionError("weight file " + path + ": unsupported version " + std::to_string(version));
  }
  ViTConfig c;
  for (std::size_t* f : {&c.image_size, &c.channels, &c.patch_size, &c.hidden_dim, &c.mlp_dim, &c.num_heads,
                         &c.num_layers, &c.num_classes}) {
    *f = rd.u32();
  }
  c.threshold = threshold;
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError("weight file " + path + ": invalid config: " + e.what());
  }
  ViTModel model(c);
  for (std::size_t i = 0; i < model.param_count(); ++i) rd.f32s(model.param_data(i));
  if (!rd.at_end()) throw FormatError("weight file " + path + ": trailing bytes");
  model.sync();
  return model;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 20;
  double learning_rate = 1.5e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  bool quantized = true;  // straight-through quantized forward
  bool cosine_decay = true;
  // With this probability a training image gets U(-a, a) pixel noise,
  // a = noise_amplitude, clamped back to [0, 1].
  double noise_probability = 0.5;
  double noise_amplitude = 0.8;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  std::vector<double> step_loss;
};

/// Mini-batch cross-entropy training with Adam. Forward passes run through
/// the quantized layers; gradients use the straight-through rule.
inline TrainResult train_toy(ViTModel& model, const ToyDataset& data, const TrainOptions& opts) {
  if (data.size() == 0) throw ParameterError("train_toy: empty dataset");
  if (opts.batch_size == 0) throw ParameterError("train_toy: batch_size must be positive");
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.config().num_classes) {
      throw ParameterError("train_toy: label out of range");
    }
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<std::vector<double>> m1(model.param_count()), m2(model.param_count());
  for (std::size_t i = 0; i < model.param_count(); ++i) {
    m1[i].assign(model.param(i).size(), 0.0);
    m2[i].assign(model.param(i).size(), 0.0);
  }
  Rng rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ForwardOptions fopts;
  fopts.quantized = opts.quantized;

  TrainResult result;
  std::size_t step = 0;
  const std::size_t steps_per_epoch = (order.size() + opts.batch_size - 1) / opts.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * opts.epochs);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      ToyDataset batch = data.subset(idx);
      if (opts.noise_probability > 0.0) {
        const std::size_t n = batch.images.size() / batch.size();
        for (std::size_t b = 0; b < batch.size(); ++b) {
          if (rng.uniform() >= opts.noise_probability) continue;
          const double a = opts.noise_amplitude;
          for (float& v : batch.images.data().subspan(b * n, n)) {
            v = std::clamp(v + static_cast<float>(rng.uniform(-a, a)), 0.0f, 1.0f);
          }
        }
      }

      ag::Tape<float> tape;
      const auto params = bind_params<float>(tape, model, true);
      const auto g = forward_graph<float>(model, params, tape.constant(batch.images), fopts);
      const auto loss = ag::cross_entropy(g.logits, std::span<const int>(batch.labels));
      tape.backward(loss);

      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      const double lr =
          opts.cosine_decay
              ? 0.5 * opts.learning_rate * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) / total_steps))
              : opts.learning_rate;
      for (std::size_t i = 0; i < model.param_count(); ++i) {
        const auto& grad = tape.grad(params[i]);
        auto w = model.param_data(i);
        for (std::size_t k = 0; k < w.size(); ++k) {
          const double gk = grad[k];
          m1[i][k] = beta1 * m1[i][k] + (1.0 - beta1) * gk;
          m2[i][k] = beta2 * m2[i][k] + (1.0 - beta2) * gk * gk;
          const double upd = lr * (m1[i][k] / c1) / (std::sqrt(m2[i][k] / c2) + adam_eps);
          w[k] = static_cast<float>(w[k] - upd);
        }
      }
      model.sync();
      const double lv = loss.value().item();
      result.step_loss.push_back(lv);
      total += lv;
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return result;
}

/// Fraction of samples whose predicted class equals the label.
inline double accuracy(const ViTModel& model, const ToyDataset& data, const ForwardOptions& opts = {},
                       std::size_t batch_size = 32) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const ToyDataset batch = data.subset(idx);
    const auto pred = predict(model, batch.images, opts);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace qattack
