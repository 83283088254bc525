// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qattack/attack.hpp"

using namespace qattack;

namespace {

ViTConfig small_config() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.hidden_dim = 16;
  c.mlp_dim = 32;
  c.num_heads = 2;
  c.num_layers = 2;
  c.num_classes = 3;
  return c;
}

Tensor random_image(const ViTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({c.channels, c.image_size, c.image_size});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

Tensor clean_logits(const ViTModel& m, const Tensor& image, bool quantized = true) {
  ForwardOptions o;
  o.quantized = quantized;
  const Shape& s = image.shape();
  return forward(m, image.reshaped({1, s[0], s[1], s[2]}), o).logits;
}

}  // namespace

TEST(QuantLoss, Examples) {
  CaptureBuffer one;
  one.states.push_back(Tensor::from_rows({{60}, {10}}));
  EXPECT_DOUBLE_EQ(quant_loss(one, 1, 70.0f), 100.0);
  CaptureBuffer two = one;
  two.states.push_back(one.states[0]);
  EXPECT_DOUBLE_EQ(quant_loss(two, 1, 70.0f), 200.0);
  CaptureBuffer saturated;
  saturated.states.push_back(Tensor::from_rows({{80, 71}, {75, 90}}));
  EXPECT_DOUBLE_EQ(quant_loss(saturated, 2, 70.0f), 0.0);
  EXPECT_THROW(quant_loss(one, 3, 70.0f), ParameterError);
  // Normalized by K*h.
  CaptureBuffer wide;
  wide.states.push_back(Tensor::from_rows({{68, 66}, {0, 0}}));
  EXPECT_DOUBLE_EQ(quant_loss(wide, 1, 70.0f), (4.0 + 16.0) / 2.0);
}

TEST(QuantLoss, HingeInactiveAboveTarget) {
  ag::Tape<double> t;
  auto x = t.variable(BasicTensor<double>::from_rows({{90, 10}, {5, 50}}));
  std::vector<ag::Var<double>> caps{x};
  auto l = quant_loss<double>(caps, 1, 70.0);
  t.backward(l);
  const auto& g = t.grad(x);
  EXPECT_EQ(g(0, 0), 0.0);  // already above target
  EXPECT_EQ(g(1, 0), 0.0);  // not selected
  EXPECT_LT(g(1, 1), 0.0);  // pulled up
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(ClassLoss, Examples) {
  const Tensor a = Tensor::from_rows({{1, 2}});
  const Tensor b = Tensor::from_rows({{1, 4}});
  EXPECT_DOUBLE_EQ(class_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(class_loss(a, b), 2.0);
  EXPECT_DOUBLE_EQ(class_loss(b, a), class_loss(a, b));
  EXPECT_THROW(class_loss(a, Tensor::from_rows({{1, 2, 3}})), ShapeError);
}

TEST(TvLoss, Examples) {
  EXPECT_LT(std::fabs(tv_loss(Tensor({3, 32, 32}, 0.37f))), 1e-3);
  const Tensor step({1, 2, 2}, std::vector<float>{0, 1, 0, 1});
  // One 1x1 difference window: sqrt(1 + eps) - sqrt(eps) with eps = kTvSmoothing.
  EXPECT_NEAR(tv_loss(step), std::sqrt(1.0 + kTvSmoothing) - std::sqrt(kTvSmoothing), 1e-6);
  Rng rng(3);
  Tensor d({3, 6, 6});
  for (auto& v : d.data()) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor shifted = d;
  for (auto& v : shifted.data()) v += 0.25f;
  EXPECT_NEAR(tv_loss(d), tv_loss(shifted), 1e-4);
  EXPECT_THROW(tv_loss(Tensor({4, 4})), ShapeError);
}

TEST(TotalLoss, ComponentsAndAblations) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 1);
  const Tensor img = random_image(c, 2);
  const Tensor clean = clean_logits(m, img);
  AttackConfig cfg;

  {
    ag::Tape<float> t;
    auto d = t.variable(Tensor(img.shape()));
    const auto g = total_loss<float>(m, img, d, clean, cfg);
    EXPECT_EQ(g.parts.acc, 0.0);
    EXPECT_LT(std::fabs(g.parts.tv), 1e-3);
    EXPECT_NEAR(g.parts.total, cfg.lambda1 * g.parts.quant + cfg.lambda2 * g.parts.acc + cfg.lambda3 * g.parts.tv,
                1e-3 * std::fabs(g.parts.total));
    EXPECT_EQ(g.traces.size(), c.quantized_layer_count());
  }

  // lambda2 = lambda3 = 0 leaves lambda1 * L_quant.
  Rng rng(4);
  Tensor dv(img.shape());
  for (auto& v : dv.data()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  AttackConfig stage1 = cfg;
  stage1.lambda2 = 0.0;
  stage1.lambda3 = 0.0;
  ag::Tape<float> t;
  auto d = t.variable(dv);
  const auto g = total_loss<float>(m, img, d, clean, stage1);
  EXPECT_FLOAT_EQ(static_cast<float>(g.parts.total), static_cast<float>(g.parts.quant));
}

TEST(TotalLoss, ZeroLambda2RemovesClassGradient) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 5);
  const Tensor img = random_image(c, 6);
  const Tensor clean = clean_logits(m, img);
  Rng rng(7);
  Tensor dv(img.shape());
  for (auto& v : dv.data()) v = static_cast<float>(rng.uniform(-0.3, 0.3));

  AttackConfig no_acc;
  no_acc.lambda2 = 0.0;
  ag::Tape<float> t1;
  auto d1 = t1.variable(dv);
  t1.backward(total_loss<float>(m, img, d1, clean, no_acc).total);

  // lambda1 * L_quant + lambda3 * L_tv built by hand.
  ag::Tape<float> t2;
  auto d2 = t2.variable(dv);
  auto adv = ag::clamp(ag::add(t2.constant(img), d2), 0.0f, 1.0f);
  ForwardOptions o;
  o.capture = true;
  const auto params = bind_params<float>(t2, m, false);
  const auto fwd = forward_graph<float>(m, params, ag::reshape(adv, {1, 3, 8, 8}), o);
  auto lq = ag::scale(quant_loss<float>(fwd.captures, no_acc.top_k, no_acc.x_target), 1.0f);
  auto lt = ag::scale(tv_loss<float>(d2), 50.0f);
  t2.backward(ag::add(lq, lt));
  EXPECT_EQ(t1.grad(d1), t2.grad(d2));
}

TEST(TotalLoss, GraphMatchesDirectForward) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 8);
  const Tensor img = random_image(c, 9);
  Tensor delta(img.shape(), 0.1f);
  ag::Tape<float> t;
  const auto g = total_loss<float>(m, img, t.variable(delta), clean_logits(m, img), AttackConfig{});
  ForwardOptions o;
  o.capture = true;
  const auto direct = forward(m, apply_perturbation(img, delta).reshaped({1, 3, 8, 8}), o);
  EXPECT_DOUBLE_EQ(g.parts.quant, quant_loss(direct.captures, 4, 70.0f));
  EXPECT_EQ(g.predicted, argmax_rows(direct.logits));
}

TEST(TotalLoss, EndToEndGradientMatchesFiniteDifferences) {
  ViTConfig c = small_config();
  const ViTModel m = init_random(c, 10);
  Rng rng(11);
  BasicTensor<double> img({3, 8, 8});
  for (auto& v : img.data()) v = rng.uniform(0.1, 0.9);
  BasicTensor<double> delta0({3, 8, 8});
  for (auto& v : delta0.data()) v = rng.uniform(-0.05, 0.05);
  ForwardOptions fp;
  fp.quantized = false;
  const Tensor clean = clean_logits(m, img.cast<float>(), false);
  const BasicTensor<double> clean_d = clean.cast<double>();
  AttackConfig cfg;
  cfg.lambda2 = 1.0;  // make the class term visible at this scale
  auto f = [&](ag::Tape<double>&, ag::Var<double> d) { return total_loss<double>(m, img, d, clean_d, cfg, fp).total; };
  EXPECT_LE(ag::finite_diff_check(f, delta0), 1e-4);
}

TEST(CosineSchedule, Endpoints) {
  AttackConfig cfg;
  EXPECT_EQ(cosine_wr_step(0, cfg), 0.02);
  EXPECT_EQ(cosine_annealing(100.0, 100.0, 0.02, 1e-5), 1e-5);
  EXPECT_DOUBLE_EQ(cosine_annealing(50.0, 100.0, 0.02, 1e-5), (0.02 + 1e-5) / 2.0);
  EXPECT_EQ(cosine_wr_step(100, cfg), 0.02);  // warm restart
  EXPECT_GT(cosine_wr_step(99, cfg), 1e-5);
  EXPECT_LT(cosine_wr_step(99, cfg), 1e-4);
}

TEST(PgdUpdate, Examples) {
  const Tensor d({2, 2, 2}, 0.1f);
  EXPECT_EQ(pgd_update(d, Tensor({2, 2, 2}), 0.02, 0.8f), d);
  const Tensor img({2, 2, 2}, 0.5f);
  const Tensor out = pgd_update(Tensor({2, 2, 2}), Tensor({2, 2, 2}, 3.0f), 0.02, 0.8f, &img);
  for (float v : out.data()) EXPECT_FLOAT_EQ(v, -0.02f);
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor dd({3, 4, 4}), gg({3, 4, 4}), xx({3, 4, 4});
    for (auto& v : dd.data()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : gg.data()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : xx.data()) v = static_cast<float>(rng.uniform());
    const Tensor r = pgd_update(dd, gg, rng.uniform(0, 0.5), 0.3f, &xx);
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_LE(std::fabs(r[i]), 0.3f);
      EXPECT_GE(xx[i] + r[i], 0.0f);
      EXPECT_LE(xx[i] + r[i], 1.0f);
    }
  }
  EXPECT_THROW(pgd_update(d, Tensor({2, 2}), 0.1, 0.8f), ShapeError);
}

TEST(AttackConfig, Validation) {
  const QuantThreshold th{};
  AttackConfig c;
  EXPECT_NO_THROW(c.validate(th));
  c.x_target = 6.0f;
  EXPECT_THROW(c.validate(th), ParameterError);
  c = AttackConfig{};
  c.epsilon = 0.0f;
  EXPECT_THROW(c.validate(th), ParameterError);
  c = AttackConfig{};
  c.top_k = 0;
  EXPECT_THROW(c.validate(th), ParameterError);
  c = AttackConfig{};
  c.alpha_min = 1.0;
  EXPECT_THROW(c.validate(th), ParameterError);
  c = AttackConfig{};
  c.variant = AttackVariant::class_universal;
  EXPECT_THROW(c.validate(th), ParameterError);
  EXPECT_EQ(AttackConfig::universal_defaults().iterations, 1000u);
  EXPECT_EQ(parse_variant("class-universal"), AttackVariant::class_universal);
  EXPECT_THROW(parse_variant("nope"), ParameterError);
}

TEST(AttackScope, Rules) {
  ToyDatasetSpec spec;
  spec.samples = 9;
  spec.classes = 3;
  spec.image_size = 8;
  const ToyDataset data = generate_toy_dataset(spec);
  AttackConfig cfg;
  const auto single = AttackScope::select(data, AttackVariant::single, -1, 4);
  EXPECT_EQ(single.size(), 1u);
  EXPECT_NO_THROW(single.validate(cfg));
  const auto cls = AttackScope::select(data, AttackVariant::class_universal, 2);
  EXPECT_EQ(cls.size(), 3u);
  cfg.variant = AttackVariant::class_universal;
  cfg.target_class = 2;
  EXPECT_NO_THROW(cls.validate(cfg));
  cfg.target_class = 1;
  EXPECT_THROW(cls.validate(cfg), ParameterError);
  cfg.variant = AttackVariant::single;
  EXPECT_THROW(AttackScope::select(data, AttackVariant::universal).validate(cfg), ParameterError);
  EXPECT_THROW(AttackScope{}.validate(cfg), ParameterError);
}

TEST(RunAttack, ZeroIterationsReturnsZeroDelta) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 12);
  AttackConfig cfg;
  cfg.iterations = 0;
  const auto r = run_attack(m, AttackScope::single(random_image(c, 13), 0), cfg);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(max_abs(r.perturbation.delta), 0.0f);
}

TEST(RunAttack, RaisesOutliersAndKeepsInvariants) {
  ViTConfig c = small_config();
  c.threshold.tau = 2.0f;
  ViTModel m = init_random(c, 14);
  const Tensor img = random_image(c, 15);
  AttackConfig cfg;
  cfg.iterations = 60;
  cfg.lambda3 = 0.0;
  cfg.alpha_max = 0.05;
  const auto r = run_attack(m, AttackScope::single(img, 0), cfg);
  ASSERT_EQ(r.history.size(), 60u);
  for (const auto& h : r.history) EXPECT_LE(h.max_abs_delta, cfg.epsilon);
  const Tensor adv = apply_perturbation(img, r.perturbation.delta);
  const auto clean_out = forward(m, img.reshaped({1, 3, 8, 8}));
  const auto adv_out = forward(m, adv.reshaped({1, 3, 8, 8}));
  EXPECT_GT(total_outliers(adv_out.traces), total_outliers(clean_out.traces));

  const auto again = run_attack(m, AttackScope::single(img, 0), cfg);
  EXPECT_EQ(again.perturbation.delta, r.perturbation.delta);
}

TEST(RunAttack, UniversalAndEnsemble) {
  const ViTConfig c = small_config();
  const ViTModel a = init_random(c, 16);
  const ViTModel b = init_random(c, 17);
  AttackScope scope;
  for (int i = 0; i < 5; ++i) {
    scope.images.push_back(random_image(c, 20 + static_cast<std::uint64_t>(i)));
    scope.labels.push_back(0);
  }
  AttackConfig cfg = AttackConfig::universal_defaults();
  cfg.iterations = 6;
  cfg.batch_size = 2;
  const std::vector<const ViTModel*> models{&a, &b};
  const auto r = run_attack(models, scope, cfg);
  bool used_a = false, used_b = false;
  for (const auto& h : r.history) {
    used_a |= h.model_index == 0;
    used_b |= h.model_index == 1;
    EXPECT_LE(h.max_abs_delta, cfg.epsilon);
  }
  EXPECT_TRUE(used_a || used_b);
  EXPECT_EQ(r.perturbation.delta.shape(), scope.images[0].shape());
  EXPECT_EQ(r.perturbation.variant, AttackVariant::universal);
}

TEST(PerturbationFile, RoundTripAndErrors) {
  Perturbation p{Tensor({3, 2, 2}, 0.25f), 0.8f, AttackVariant::class_universal, 4};
  p.delta[5] = -0.5f;
  const std::string path = (std::filesystem::temp_directory_path() / "qattack_test_delta.qtvp").string();
  save_perturbation(p, path);
  const Perturbation q = load_perturbation(path);
  EXPECT_EQ(q.delta, p.delta);
  EXPECT_EQ(q.epsilon, p.epsilon);
  EXPECT_EQ(q.variant, p.variant);
  EXPECT_EQ(q.target_class, 4);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write("QTVW" + bytes.substr(4));
  EXPECT_THROW(load_perturbation(path), MagicError);
  write(bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_perturbation(path), TruncationError);
  std::filesystem::remove(path);
}
