// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver pieces shared by the CLI and the acceptance suite:
// analytic cost model, clean/random/adversarial evaluation, batch
// contamination, transfer, outlier-cap sweeps, reports and JSON config.
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qattack/attack.hpp"
#include "qattack/dataset.hpp"
#include "qattack/errors.hpp"
#include "qattack/quantlinear.hpp"
#include "qattack/rng.hpp"
#include "qattack/tensor.hpp"
#include "qattack/vit.hpp"

namespace qattack {

/// Cost units per operation. Stands in for time and energy.
struct CostModel {
  double int8_mac_cost = 1.0;
  double f16_mac_cost = 4.0;
  double byte_cost = 0.0;

  void validate() const {
    for (double c : {int8_mac_cost, f16_mac_cost, byte_cost}) {
      if (!(c >= 0.0) || !std::isfinite(c)) throw ParameterError("cost model: costs must be finite and >= 0");
    }
  }
};

struct TraceTotals {
  std::uint64_t outlier_count = 0;
  std::uint64_t f16_macs = 0;
  std::uint64_t int8_macs = 0;
  std::uint64_t bytes_moved = 0;

  void add(const MatmulTrace& t) {
    outlier_count += t.outlier_count();
    f16_macs += t.f16_macs;
    int8_macs += t.int8_macs;
    bytes_moved += t.bytes_moved;
  }
  void add(std::span<const MatmulTrace> traces) {
    for (const auto& t : traces) add(t);
  }
};

inline double cost_units(const TraceTotals& t, const CostModel& c) {
  return static_cast<double>(t.f16_macs) * c.f16_mac_cost + static_cast<double>(t.int8_macs) * c.int8_mac_cost +
         static_cast<double>(t.bytes_moved) * c.byte_cost;
}

struct ConditionReport {
  std::string condition;  // clean | random | adversarial
  TraceTotals totals;
  double cost_units = 0.0;
  double accuracy_preserved_fraction = 1.0;
  std::optional<double> logit_deviation;  // cap sweeps only
  std::optional<double> wall_clock_ms;
};

inline constexpr std::array<std::string_view, 5> kReportMetrics{"outlier_count", "f16_macs", "int8_macs",
                                                                "bytes_moved", "cost_units"};

inline double metric_value(const ConditionReport& c, std::string_view metric) {
  if (metric == "outlier_count") return static_cast<double>(c.totals.outlier_count);
  if (metric == "f16_macs") return static_cast<double>(c.totals.f16_macs);
  if (metric == "int8_macs") return static_cast<double>(c.totals.int8_macs);
  if (metric == "bytes_moved") return static_cast<double>(c.totals.bytes_moved);
  if (metric == "cost_units") return c.cost_units;
  throw ParameterError("unknown report metric \"" + std::string(metric) + "\"");
}

struct EvalReport {
  std::string label;
  std::size_t batch_size = 1;
  std::optional<std::size_t> cap;  // set by countermeasure sweeps
  std::vector<ConditionReport> conditions;

  bool has(std::string_view name) const {
    for (const auto& c : conditions)
      if (c.condition == name) return true;
    return false;
  }

  const ConditionReport& condition(std::string_view name) const {
    for (const auto& c : conditions)
      if (c.condition == name) return c;
    throw ParameterError("report \"" + label + "\" has no condition \"" + std::string(name) + "\"");
  }

  /// num / clean for one metric; empty when the clean value is zero.
  std::optional<double> ratio(std::string_view metric, std::string_view num = "adversarial") const {
    const double den = metric_value(condition("clean"), metric);
    if (den == 0.0) return std::nullopt;
    return metric_value(condition(num), metric) / den;
  }

  /// ratio - 1, the relative overhead of `num` over clean.
  std::optional<double> overhead(std::string_view metric, std::string_view num = "adversarial") const {
    const auto r = ratio(metric, num);
    if (!r) return std::nullopt;
    return *r - 1.0;
  }
};

struct EvalOptions {
  std::uint64_t seed = 0;      // random-baseline noise
  float epsilon = 0.8f;        // random-baseline L-inf budget
  OutlierPolicy policy{};
  bool timing = false;         // fill wall_clock_ms
};

namespace detail {

struct ConditionRun {
  ConditionReport report;
  std::vector<int> predictions;
  Tensor logits;  // N x M
};

// Forwards each image on its own and sums the traces.
inline ConditionRun run_condition(const ViTModel& model, const std::vector<Tensor>& images, std::string name,
                                  const CostModel& cost, const EvalOptions& opts,
                                  const std::vector<int>* reference) {
  ConditionRun out;
  out.report.condition = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  ForwardOptions fopts;
  fopts.policy = opts.policy;
  const std::size_t m = model.config().num_classes;
  out.logits = Tensor({images.size(), m});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Shape& s = images[i].shape();
    const auto fwd = forward(model, images[i].reshaped({1, s[0], s[1], s[2]}), fopts);
    out.report.totals.add(fwd.traces);
    std::copy(fwd.logits.data().begin(), fwd.logits.data().end(),
              out.logits.data().begin() + static_cast<std::ptrdiff_t>(i * m));
    out.predictions.push_back(argmax_rows(fwd.logits).front());
  }
  if (opts.timing) {
    out.report.wall_clock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  out.report.cost_units = cost_units(out.report.totals, cost);
  if (reference != nullptr && !images.empty()) {
    std::size_t same = 0;
    for (std::size_t i = 0; i < images.size(); ++i) same += out.predictions[i] == (*reference)[i];
    out.report.accuracy_preserved_fraction = static_cast<double>(same) / static_cast<double>(images.size());
  }
  return out;
}

inline std::vector<Tensor> unstack(const Tensor& images) {
  require_rank(images.shape(), 4, "image batch");
  std::vector<Tensor> out;
  const std::size_t n = images.size() / images.dim(0);
  for (std::size_t b = 0; b < images.dim(0); ++b) {
    std::vector<float> d(images.data().begin() + static_cast<std::ptrdiff_t>(b * n),
                         images.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
    out.emplace_back(Shape{images.dim(1), images.dim(2), images.dim(3)}, std::move(d));
  }
  return out;
}

// One delta shared by all images, or one per image.
inline std::vector<Tensor> perturb_all(const std::vector<Tensor>& images, const std::vector<Tensor>& deltas) {
  if (deltas.size() != 1 && deltas.size() != images.size()) {
    throw ShapeError("need one perturbation or one per image, got " + std::to_string(deltas.size()) + " for " +
                     std::to_string(images.size()) + " images");
  }
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(apply_perturbation(images[i], deltas[deltas.size() == 1 ? 0 : i]));
  }
  return out;
}

inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace detail

/// Seeded U(-1, 1) noise scaled to `epsilon`, one tensor per image.
inline std::vector<Tensor> random_perturbations(std::size_t count, const Shape& shape, float epsilon,
                                                std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor d(shape);
    for (float& v : d.data()) v = epsilon * static_cast<float>(rng.uniform(-1.0, 1.0));
    out.push_back(std::move(d));
  }
  return out;
}

/// Clean, random and adversarial conditions over `images` (N x C x H x W).
/// Accuracy preservation is measured against the clean predictions.
inline EvalReport evaluate_baselines(const ViTModel& model, const Tensor& images, const std::vector<Tensor>& deltas,
                                     const CostModel& cost, const EvalOptions& opts = {},
                                     std::string label = "baselines") {
  cost.validate();
  const auto clean_images = detail::unstack(images);
  EvalReport rep;
  rep.label = std::move(label);
  auto clean = detail::run_condition(model, clean_images, "clean", cost, opts, nullptr);
  const auto noise = random_perturbations(clean_images.size(), clean_images.front().shape(), opts.epsilon, opts.seed);
  auto random = detail::run_condition(model, detail::perturb_all(clean_images, noise), "random", cost, opts,
                                      &clean.predictions);
  auto adv = detail::run_condition(model, detail::perturb_all(clean_images, deltas), "adversarial", cost, opts,
                                   &clean.predictions);
  clean.report.accuracy_preserved_fraction = 1.0;
  rep.conditions = {clean.report, random.report, adv.report};
  return rep;
}

/// Evaluates perturbations crafted on another model (or an ensemble) on
/// `victim`. Same conditions as evaluate_baselines.
inline EvalReport transfer_eval(const std::vector<Tensor>& deltas, const ViTModel& victim, const Tensor& images,
                                const CostModel& cost, const EvalOptions& opts = {}, std::string label = "transfer") {
  return evaluate_baselines(victim, images, deltas, cost, opts, std::move(label));
}

/// For each B, an all-clean batch of the first B images against the same
/// batch with image 0 replaced by `adv_image`. Each batch is one stacked
/// forward, so an outlier column forced by the adversarial rows applies to
/// every row of the batch.
inline std::vector<EvalReport> batch_contamination(const ViTModel& model, const Tensor& clean_images,
                                                   const Tensor& adv_image, const std::vector<std::size_t>& batch_sizes,
                                                   const CostModel& cost, const EvalOptions& opts = {}) {
  cost.validate();
  const auto pool = detail::unstack(clean_images);
  if (adv_image.shape() != pool.front().shape()) throw ShapeError("batch_contamination: adversarial image shape");
  std::vector<EvalReport> out;
  ForwardOptions fopts;
  fopts.policy = opts.policy;
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw ParameterError("batch_contamination: batch size must be >= 1");
    if (b > pool.size()) {
      throw ParameterError("batch_contamination: batch size " + std::to_string(b) + " exceeds " +
                           std::to_string(pool.size()) + " available images");
    }
    std::vector<Tensor> batch(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
    EvalReport rep;
    rep.label = "batch";
    rep.batch_size = b;
    std::vector<int> clean_pred;
    for (int pass = 0; pass < 2; ++pass) {
      if (pass == 1) batch[0] = adv_image;
      const auto t0 = std::chrono::steady_clock::now();
      const auto fwd = forward(model, stack_images(batch), fopts);
      ConditionReport c;
      c.condition = pass == 0 ? "clean" : "adversarial";
      c.totals.add(fwd.traces);
      c.cost_units = cost_units(c.totals, cost);
      const auto pred = argmax_rows(fwd.logits);
      if (pass == 0) {
        clean_pred = pred;
      } else {
        std::size_t same = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) same += pred[i] == clean_pred[i];
        c.accuracy_preserved_fraction = static_cast<double>(same) / static_cast<double>(pred.size());
      }
      if (opts.timing) {
        c.wall_clock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      rep.conditions.push_back(std::move(c));
    }
    out.push_back(std::move(rep));
  }
  return out;
}

/// Re-runs the clean and adversarial conditions under each outlier cap
/// (nullopt = unlimited). logit_deviation is the mean absolute logit
/// difference from the uncapped quantized forward on the same inputs.
inline std::vector<EvalReport> countermeasure_sweep(const ViTModel& model, const Tensor& images,
                                                    const std::vector<Tensor>& deltas,
                                                    const std::vector<std::optional<std::size_t>>& caps,
                                                    const CostModel& cost, const EvalOptions& opts = {}) {
  cost.validate();
  const auto clean_images = detail::unstack(images);
  const auto adv_images = detail::perturb_all(clean_images, deltas);
  EvalOptions base = opts;
  base.policy = OutlierPolicy::unlimited();
  const auto ref_clean = detail::run_condition(model, clean_images, "clean", cost, base, nullptr);
  const auto ref_adv = detail::run_condition(model, adv_images, "adversarial", cost, base, nullptr);

  std::vector<EvalReport> out;
  for (const auto& cap : caps) {
    EvalOptions o = opts;
    o.policy = cap ? OutlierPolicy::capped(*cap) : OutlierPolicy::unlimited();
    EvalReport rep;
    rep.label = "cap";
    rep.cap = cap;
    auto clean = detail::run_condition(model, clean_images, "clean", cost, o, &ref_clean.predictions);
    auto adv = detail::run_condition(model, adv_images, "adversarial", cost, o, &ref_clean.predictions);
    clean.report.logit_deviation = detail::mean_abs_diff(clean.logits, ref_clean.logits);
    adv.report.logit_deviation = detail::mean_abs_diff(adv.logits, ref_adv.logits);
    rep.conditions = {clean.report, adv.report};
    out.push_back(std::move(rep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { json, csv };

inline ReportFormat parse_format(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw ParameterError("unknown report format \"" + s + "\" (expected json or csv)");
}

inline constexpr std::string_view kCsvHeader =
    "label,batch_size,cap,condition,outlier_count,f16_macs,int8_macs,bytes_moved,cost_units,"
    "accuracy_preserved_fraction,logit_deviation,wall_clock_ms";

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["label"] = r.label;
  j["batch_size"] = r.batch_size;
  j["cap"] = r.cap ? ordered_json(*r.cap) : ordered_json(nullptr);
  ordered_json conds = ordered_json::array();
  for (const auto& c : r.conditions) {
    ordered_json cj;
    cj["condition"] = c.condition;
    cj["outlier_count"] = c.totals.outlier_count;
    cj["f16_macs"] = c.totals.f16_macs;
    cj["int8_macs"] = c.totals.int8_macs;
    cj["bytes_moved"] = c.totals.bytes_moved;
    cj["cost_units"] = c.cost_units;
    cj["accuracy_preserved_fraction"] = c.accuracy_preserved_fraction;
    if (c.logit_deviation) cj["logit_deviation"] = *c.logit_deviation;
    if (c.wall_clock_ms) cj["wall_clock_ms"] = *c.wall_clock_ms;
    conds.push_back(std::move(cj));
  }
  j["conditions"] = std::move(conds);
  ordered_json ratios = ordered_json::object();
  if (r.has("clean")) {
    for (const auto& c : r.conditions) {
      if (c.condition == "clean") continue;
      ordered_json rj;
      for (auto m : kReportMetrics) {
        const auto v = r.ratio(m, c.condition);
        rj[std::string(m)] = v ? ordered_json(*v) : ordered_json(nullptr);
      }
      ratios[c.condition + "/clean"] = std::move(rj);
    }
  }
  j["ratios"] = std::move(ratios);
  return j;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string reports_to_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : reports) {
    for (const auto& c : r.conditions) {
      os << r.label << ',' << r.batch_size << ',' << (r.cap ? std::to_string(*r.cap) : "") << ',' << c.condition
         << ',' << c.totals.outlier_count << ',' << c.totals.f16_macs << ',' << c.totals.int8_macs << ','
         << c.totals.bytes_moved << ',' << format_number(c.cost_units) << ','
         << format_number(c.accuracy_preserved_fraction) << ','
         << (c.logit_deviation ? format_number(*c.logit_deviation) : "") << ','
         << (c.wall_clock_ms ? format_number(*c.wall_clock_ms) : "") << '\n';
    }
  }
  return os.str();
}

inline std::string reports_to_json(const std::vector<EvalReport>& reports) {
  nlohmann::ordered_json j;
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
  return j.dump(2) + "\n";
}

inline void write_report(const std::vector<EvalReport>& reports, const std::string& path, ReportFormat format) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_report: cannot open " + path);
  os << (format == ReportFormat::json ? reports_to_json(reports) : reports_to_csv(reports));
  if (!os) throw Error("write_report: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Experiment configuration (JSON)
// ---------------------------------------------------------------------------

struct CalibrationConfig {
  double target_columns = 6.0;  // mean clean outlier columns per layer and image
  std::size_t images = 200;     // taken from the start of the training split
};

struct ExperimentConfig {
  ViTConfig vit;
  AttackConfig attack;
  CostModel cost;
  ToyDatasetSpec data;
  TrainOptions train;
  CalibrationConfig calibration;
  std::uint64_t model_seed = 1;  // init_random seed
  std::size_t eval_images = 20;

  void validate() const {
    vit.validate();
    attack.validate(vit.threshold);
    cost.validate();
    if (!(calibration.target_columns > 0.0)) throw ParameterError("calibration.target_columns must be > 0");
  }
};

namespace detail {

using json = nlohmann::json;

// Reads known keys from `obj` into fields; any other key is an error.
class JsonFields {
 public:
  JsonFields(const json& obj, std::string section) : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object()) throw ParameterError("config: \"" + section_ + "\" must be an object");
  }

  template <class T>
  void get(const char* key, T& field) {
    seen_.emplace_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const json::exception& e) {
      throw ParameterError("config: " + section_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ParameterError("config: unknown key \"" + section_ + "." + k + "\"");
      }
    }
  }

 private:
  const json& obj_;
  std::string section_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::JsonFields;
  ExperimentConfig c;
  JsonFields top(j, "config");
  nlohmann::json vit, attack, cost, data, train, calib;
  top.get("vit", vit);
  top.get("attack", attack);
  top.get("cost", cost);
  top.get("data", data);
  top.get("train", train);
  top.get("calibration", calib);
  top.get("model_seed", c.model_seed);
  top.get("eval_images", c.eval_images);
  top.finish();

  if (!vit.is_null()) {
    JsonFields f(vit, "vit");
    f.get("image_size", c.vit.image_size);
    f.get("channels", c.vit.channels);
    f.get("patch_size", c.vit.patch_size);
    f.get("hidden_dim", c.vit.hidden_dim);
    f.get("mlp_dim", c.vit.mlp_dim);
    f.get("num_heads", c.vit.num_heads);
    f.get("num_layers", c.vit.num_layers);
    f.get("num_classes", c.vit.num_classes);
    f.get("tau", c.vit.threshold.tau);
    std::string test = c.vit.threshold.test == OutlierTest::magnitude ? "magnitude" : "signed_max";
    f.get("outlier_test", test);
    if (test == "magnitude") {
      c.vit.threshold.test = OutlierTest::magnitude;
    } else if (test == "signed_max") {
      c.vit.threshold.test = OutlierTest::signed_max;
    } else {
      throw ParameterError("config: vit.outlier_test must be \"magnitude\" or \"signed_max\"");
    }
    f.finish();
  }
  if (!attack.is_null()) {
    JsonFields f(attack, "attack");
    std::string variant = variant_name(c.attack.variant);
    f.get("variant", variant);
    c.attack.variant = parse_variant(variant);
    f.get("lambda1", c.attack.lambda1);
    f.get("lambda2", c.attack.lambda2);
    f.get("lambda3", c.attack.lambda3);
    f.get("epsilon", c.attack.epsilon);
    f.get("alpha_max", c.attack.alpha_max);
    f.get("alpha_min", c.attack.alpha_min);
    f.get("restart_period", c.attack.restart_period);
    f.get("iterations", c.attack.iterations);
    f.get("top_k", c.attack.top_k);
    f.get("x_target", c.attack.x_target);
    f.get("target_class", c.attack.target_class);
    f.get("seed", c.attack.seed);
    f.get("batch_size", c.attack.batch_size);
    f.finish();
    if (c.attack.variant != AttackVariant::single && !attack.contains("iterations")) {
      c.attack.iterations = AttackConfig::universal_defaults().iterations;
    }
  }
  if (!cost.is_null()) {
    JsonFields f(cost, "cost");
    f.get("int8_mac_cost", c.cost.int8_mac_cost);
    f.get("f16_mac_cost", c.cost.f16_mac_cost);
    f.get("byte_cost", c.cost.byte_cost);
    f.finish();
  }
  if (!data.is_null()) {
    JsonFields f(data, "data");
    f.get("seed", c.data.seed);
    f.get("samples", c.data.samples);
    f.get("classes", c.data.classes);
    f.get("image_size", c.data.image_size);
    f.get("channels", c.data.channels);
    f.finish();
  }
  if (!train.is_null()) {
    JsonFields f(train, "train");
    f.get("epochs", c.train.epochs);
    f.get("learning_rate", c.train.learning_rate);
    f.get("batch_size", c.train.batch_size);
    f.get("seed", c.train.seed);
    f.get("quantized", c.train.quantized);
    f.get("cosine_decay", c.train.cosine_decay);
    f.get("noise_probability", c.train.noise_probability);
    f.get("noise_amplitude", c.train.noise_amplitude);
    f.finish();
  }
  if (!calib.is_null()) {
    JsonFields f(calib, "calibration");
    f.get("target_columns", c.calibration.target_columns);
    f.get("images", c.calibration.images);
    f.finish();
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["vit"] = {{"image_size", c.vit.image_size},
              {"channels", c.vit.channels},
              {"patch_size", c.vit.patch_size},
              {"hidden_dim", c.vit.hidden_dim},
              {"mlp_dim", c.vit.mlp_dim},
              {"num_heads", c.vit.num_heads},
              {"num_layers", c.vit.num_layers},
              {"num_classes", c.vit.num_classes},
              {"tau", c.vit.threshold.tau},
              {"outlier_test", c.vit.threshold.test == OutlierTest::magnitude ? "magnitude" : "signed_max"}};
  j["attack"] = {{"variant", variant_name(c.attack.variant)},
                 {"lambda1", c.attack.lambda1},
                 {"lambda2", c.attack.lambda2},
                 {"lambda3", c.attack.lambda3},
                 {"epsilon", c.attack.epsilon},
                 {"alpha_max", c.attack.alpha_max},
                 {"alpha_min", c.attack.alpha_min},
                 {"restart_period", c.attack.restart_period},
                 {"iterations", c.attack.iterations},
                 {"top_k", c.attack.top_k},
                 {"x_target", c.attack.x_target},
                 {"target_class", c.attack.target_class},
                 {"seed", c.attack.seed},
                 {"batch_size", c.attack.batch_size}};
  j["cost"] = {{"int8_mac_cost", c.cost.int8_mac_cost},
               {"f16_mac_cost", c.cost.f16_mac_cost},
               {"byte_cost", c.cost.byte_cost}};
  j["data"] = {{"seed", c.data.seed},
               {"samples", c.data.samples},
               {"classes", c.data.classes},
               {"image_size", c.data.image_size},
               {"channels", c.data.channels}};
  j["train"] = {{"epochs", c.train.epochs},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},
                {"quantized", c.train.quantized},
                {"cosine_decay", c.train.cosine_decay},
                {"noise_probability", c.train.noise_probability},
                {"noise_amplitude", c.train.noise_amplitude}};
  j["calibration"] = {{"target_columns", c.calibration.target_columns}, {"images", c.calibration.images}};
  j["model_seed"] = c.model_seed;
  j["eval_images"] = c.eval_images;
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("load_config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParameterError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Model preparation
// ---------------------------------------------------------------------------

struct PreparedModel {
  ViTModel model;
  TrainResult training;
  std::vector<float> calibration;
};

/// init_random, train_toy, then calibrate_quant_inputs on the head of the
/// training split.
inline PreparedModel prepare_model(const ExperimentConfig& cfg, const ToyDataset& train_set) {
  PreparedModel p{init_random(cfg.vit, cfg.model_seed), {}, {}};
  p.training = train_toy(p.model, train_set, cfg.train);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(cfg.calibration.images, train_set.size()); ++i) idx.push_back(i);
  p.calibration = calibrate_quant_inputs(p.model, train_set.subset(idx).images, cfg.calibration.target_columns);
  return p;
}

}  // namespace qattack
