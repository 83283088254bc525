// SPDX-License-Identifier: Apache-2.0
//
// qattack: command line front end for data generation, training, attacks
// and the evaluation experiments.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qattack/qattack.hpp"

namespace {

using namespace qattack;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data_path;
  std::string output;
  std::string format = "json";
};

void add_common(CLI::App* cmd, Common& c, bool with_output, bool with_format) {
  cmd->add_option("-c,--config", c.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("-s,--seed", c.seed, "seed override");
  cmd->add_option("-d,--data", c.data_path, "dataset file from gen-data (default: generate from config)")
      ->check(CLI::ExistingFile);
  if (with_output) cmd->add_option("-o,--output", c.output, "output path")->required();
  if (with_format) {
    cmd->add_option("-f,--format", c.format, "report format")->check(CLI::IsMember({"json", "csv"}));
  }
}

ExperimentConfig load(const Common& c) { return c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path); }

ToyDataset dataset(const Common& c, const ExperimentConfig& cfg) {
  return c.data_path.empty() ? generate_toy_dataset(cfg.data) : load_dataset(c.data_path);
}

ToyDataset test_split(const Common& c, const ExperimentConfig& cfg) { return split_dataset(dataset(c, cfg)).second; }

std::vector<std::size_t> index_range(std::size_t first, std::size_t count, std::size_t limit) {
  if (first + count > limit) {
    throw ParameterError("image range [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") exceeds the " + std::to_string(limit) + " test images");
  }
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return idx;
}

void emit(const std::vector<EvalReport>& reports, const Common& c) {
  const auto fmt = parse_format(c.format);
  if (c.output.empty() || c.output == "-") {
    std::cout << (fmt == ReportFormat::json ? reports_to_json(reports) : reports_to_csv(reports));
  } else {
    write_report(reports, c.output, fmt);
  }
}

std::vector<Tensor> load_deltas(const std::vector<std::string>& paths) {
  std::vector<Tensor> out;
  for (const auto& p : paths) out.push_back(load_perturbation(p).delta);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization availability attack testbed"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write the toy dataset to a file");
  add_common(gen_cmd, gen, true, false);
  gen_cmd->callback([&] {
    auto cfg = load(gen);
    if (gen.seed) cfg.data.seed = *gen.seed;
    const auto ds = generate_toy_dataset(cfg.data);
    save_dataset(ds, gen.output);
    std::cout << "wrote " << ds.size() << " images to " << gen.output << "\n";
  });

  // train
  Common tr;
  std::string train_report;
  auto* tr_cmd = app.add_subcommand("train", "train, calibrate and save a toy model");
  add_common(tr_cmd, tr, true, false);
  tr_cmd->add_option("--report", train_report, "write loss history and accuracy as JSON");
  tr_cmd->callback([&] {
    auto cfg = load(tr);
    if (tr.seed) cfg.model_seed = *tr.seed;
    const auto [train_set, test_set] = split_dataset(dataset(tr, cfg));
    auto prepared = prepare_model(cfg, train_set);
    save_weights(prepared.model, tr.output);
    const double acc_q = accuracy(prepared.model, test_set);
    ForwardOptions fp;
    fp.quantized = false;
    const double acc_fp = accuracy(prepared.model, test_set, fp);
    std::cout << "held-out accuracy: quantized " << acc_q << ", full precision " << acc_fp << "\n";
    if (!train_report.empty()) {
      nlohmann::ordered_json j;
      j["config"] = config_to_json(cfg);
      j["epoch_loss"] = prepared.training.epoch_loss;
      j["calibration"] = prepared.calibration;
      j["accuracy_quantized"] = acc_q;
      j["accuracy_full_precision"] = acc_fp;
      std::ofstream(train_report) << j.dump(2) << "\n";
    }
  });

  // attack
  Common at;
  std::vector<std::string> at_weights;
  std::string variant;
  std::optional<int> target_class;
  std::optional<std::size_t> iterations;
  std::size_t at_index = 0;
  std::string history_path;
  auto* at_cmd = app.add_subcommand("attack", "craft a perturbation (several --weights = ensemble)");
  add_common(at_cmd, at, true, false);
  at_cmd->add_option("-w,--weights", at_weights, "model weight file(s)")->required()->check(CLI::ExistingFile);
  at_cmd->add_option("--variant", variant, "single | class-universal | universal")
      ->check(CLI::IsMember({"single", "class-universal", "universal"}));
  at_cmd->add_option("--target-class", target_class, "class for the class-universal variant");
  at_cmd->add_option("--iterations", iterations, "override the iteration count");
  at_cmd->add_option("--index", at_index, "test image index for the single variant");
  at_cmd->add_option("--history", history_path, "write the per-iteration history as CSV");
  at_cmd->callback([&] {
    auto cfg = load(at);
    AttackConfig ac = cfg.attack;
    if (!variant.empty()) {
      const auto v = parse_variant(variant);
      if (v != AttackVariant::single && ac.variant == AttackVariant::single && !iterations) {
        ac.iterations = AttackConfig::universal_defaults().iterations;
      }
      ac.variant = v;
    }
    if (target_class) ac.target_class = *target_class;
    if (iterations) ac.iterations = *iterations;
    if (at.seed) ac.seed = *at.seed;
    std::vector<ViTModel> models;
    for (const auto& w : at_weights) models.push_back(load_weights(w, cfg.vit.threshold));
    std::vector<const ViTModel*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    const auto test_set = test_split(at, cfg);
    const auto scope = AttackScope::select(test_set, ac.variant, ac.target_class, at_index);
    const auto result = run_attack(ptrs, scope, ac);
    save_perturbation(result.perturbation, at.output);
    if (!history_path.empty()) {
      std::ofstream os(history_path);
      os << "iteration,alpha,loss_total,loss_quant,loss_acc,loss_tv,outlier_count,max_abs_delta,model_index\n";
      for (const auto& h : result.history) {
        os << h.iteration << ',' << format_number(h.alpha) << ',' << format_number(h.loss.total) << ','
           << format_number(h.loss.quant) << ',' << format_number(h.loss.acc) << ',' << format_number(h.loss.tv)
           << ',' << h.outlier_count << ',' << format_number(h.max_abs_delta) << ',' << h.model_index << '\n';
      }
    }
    std::cout << "wrote " << variant_name(ac.variant) << " perturbation over " << scope.size() << " image(s) to "
              << at.output << "\n";
  });

  // eval / transfer share their options
  struct EvalArgs {
    Common common;
    std::string weights;
    std::vector<std::string> perturbations;
    std::size_t index = 0;
    std::optional<std::size_t> count;
    bool timing = false;
  };
  const auto add_eval = [](CLI::App* cmd, EvalArgs& a) {
    add_common(cmd, a.common, false, true);
    cmd->add_option("-o,--output", a.common.output, "report path (default: stdout)");
    cmd->add_option("-w,--weights", a.weights, "model weight file")->required()->check(CLI::ExistingFile);
    cmd->add_option("-p,--perturbation", a.perturbations, "perturbation file(s): one shared or one per image")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--index", a.index, "first test image");
    cmd->add_option("--count", a.count, "number of test images (default: one per perturbation file)");
    cmd->add_flag("--timing", a.timing, "report wall-clock times");
  };
  const auto run_eval = [](const EvalArgs& a, const std::string& label) {
    const auto cfg = load(a.common);
    const auto model = load_weights(a.weights, cfg.vit.threshold);
    const auto test_set = test_split(a.common, cfg);
    const std::size_t n = a.count.value_or(a.perturbations.size() == 1 ? 1 : a.perturbations.size());
    const auto subset = test_set.subset(index_range(a.index, n, test_set.size()));
    EvalOptions opts;
    opts.seed = a.common.seed.value_or(cfg.attack.seed);
    opts.epsilon = cfg.attack.epsilon;
    opts.timing = a.timing;
    emit({evaluate_baselines(model, subset.images, load_deltas(a.perturbations), cfg.cost, opts, label)}, a.common);
  };

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "clean / random / adversarial comparison");
  add_eval(ev_cmd, ev);
  ev_cmd->callback([&] { run_eval(ev, "baselines"); });

  EvalArgs tf;
  auto* tf_cmd = app.add_subcommand("transfer", "evaluate perturbations on a model they were not crafted on");
  add_eval(tf_cmd, tf);
  tf_cmd->callback([&] { run_eval(tf, "transfer"); });

  // batch-exp
  Common bx;
  std::string bx_weights, bx_pert;
  std::size_t bx_index = 0;
  std::vector<std::size_t> batch_sizes{1, 2, 4, 8, 16};
  auto* bx_cmd = app.add_subcommand("batch-exp", "one adversarial image inside clean batches of several sizes");
  add_common(bx_cmd, bx, false, true);
  bx_cmd->add_option("-o,--output", bx.output, "report path (default: stdout)");
  bx_cmd->add_option("-w,--weights", bx_weights, "model weight file")->required()->check(CLI::ExistingFile);
  bx_cmd->add_option("-p,--perturbation", bx_pert, "perturbation for the test image at --index")
      ->required()
      ->check(CLI::ExistingFile);
  bx_cmd->add_option("--index", bx_index, "test image the perturbation belongs to");
  bx_cmd->add_option("--batch-sizes", batch_sizes, "batch sizes")->delimiter(',');
  bx_cmd->callback([&] {
    const auto cfg = load(bx);
    const auto model = load_weights(bx_weights, cfg.vit.threshold);
    const auto test_set = test_split(bx, cfg);
    const std::size_t largest = *std::max_element(batch_sizes.begin(), batch_sizes.end());
    // The attacked image goes first, the rest are the following test images.
    std::vector<std::size_t> idx{bx_index};
    for (std::size_t i = 0; idx.size() < largest && i < test_set.size(); ++i)
      if (i != bx_index) idx.push_back(i);
    const auto pool = test_set.subset(idx);
    const Tensor adv = apply_perturbation(pool.image(0), load_perturbation(bx_pert).delta);
    emit(batch_contamination(model, pool.images, adv, batch_sizes, cfg.cost), bx);
  });

  // sweep-cap
  EvalArgs sw;
  std::vector<std::string> caps_arg;
  auto* sw_cmd = app.add_subcommand("sweep-cap", "outlier-cap countermeasure sweep");
  add_eval(sw_cmd, sw);
  sw_cmd->add_option("--caps", caps_arg, "caps, 'none' = unlimited (default: 0,h/8,h/4,h/2,none)")->delimiter(',');
  sw_cmd->callback([&] {
    const auto cfg = load(sw.common);
    const auto model = load_weights(sw.weights, cfg.vit.threshold);
    const auto test_set = test_split(sw.common, cfg);
    const std::size_t n = sw.count.value_or(sw.perturbations.size());
    const auto subset = test_set.subset(index_range(sw.index, n, test_set.size()));
    std::vector<std::optional<std::size_t>> caps;
    if (caps_arg.empty()) {
      const std::size_t h = cfg.vit.hidden_dim;
      caps = {std::size_t{0}, h / 8, h / 4, h / 2, std::nullopt};
    }
    for (const auto& c : caps_arg) {
      if (c == "none") {
        caps.emplace_back(std::nullopt);
      } else {
        try {
          caps.emplace_back(std::stoul(c));
        } catch (const std::exception&) {
          throw CLI::ValidationError("--caps", "not a cap: " + c);
        }
      }
    }
    EvalOptions opts;
    opts.timing = sw.timing;
    emit(countermeasure_sweep(model, subset.images, load_deltas(sw.perturbations), caps, cfg.cost, opts),
         sw.common);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
