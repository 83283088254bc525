// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "qattack/dataset.hpp"
#include "qattack/vit.hpp"

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

Tensor random_images(std::size_t b, const ViTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({b, c.channels, c.image_size, c.image_size});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("qattack_test_" + name)).string();
}

}  // namespace

TEST(ViTConfig, Validation) {
  ViTConfig c = small_config();
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = small_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = small_config();
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_EQ(ViTConfig{}.seq_len(), 65u);
}

TEST(ViTForward, ShapesTracesAndCaptures) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 1);
  ForwardOptions o;
  o.capture = true;
  const auto out = forward(m, random_images(1, c, 2), o);
  EXPECT_EQ(out.logits.shape(), Shape({1, c.num_classes}));
  EXPECT_EQ(out.traces.size(), 4 * c.num_layers);
  EXPECT_EQ(out.captures.size(), out.traces.size());
  for (std::size_t i = 0; i < out.traces.size(); ++i) {
    EXPECT_EQ(out.captures.layer_ids[i], out.traces[i].layer_id);
    EXPECT_EQ(out.traces[i].s_rows, c.seq_len());
  }
  EXPECT_EQ(out.traces[0].layer_id, "block0.qkv");
  EXPECT_EQ(out.traces[3].layer_id, "block0.fc2");
}

TEST(ViTForward, BatchTracesStackRows) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 1);
  const auto out = forward(m, random_images(2, c, 3));
  for (const auto& t : out.traces) EXPECT_EQ(t.s_rows, 2 * c.seq_len());
  EXPECT_EQ(out.logits.rows(), 2u);
}

TEST(ViTForward, BatchedFullPrecisionMatchesPerImage) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 4);
  const Tensor imgs = random_images(3, c, 5);
  ForwardOptions fp;
  fp.quantized = false;
  const auto batched = forward(m, imgs, fp).logits;
  const ToyDataset ds{imgs, {0, 0, 0}};
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor one = ds.image(b).reshaped({1, c.channels, c.image_size, c.image_size});
    const auto single = forward(m, one, fp).logits;
    for (std::size_t k = 0; k < c.num_classes; ++k) EXPECT_NEAR(single(0, k), batched(b, k), 1e-5f);
  }
}

TEST(ViTForward, DimensionMismatchRejected) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 1);
  EXPECT_THROW(forward(m, Tensor({1, 3, 4, 4})), ShapeError);
  EXPECT_THROW(forward(m, Tensor({3, 8, 8})), ShapeError);
}

TEST(ViTForward, Deterministic) {
  const ViTConfig c = small_config();
  const Tensor imgs = random_images(2, c, 6);
  const auto a = forward(init_random(c, 9), imgs);
  const auto b = forward(init_random(c, 9), imgs);
  EXPECT_EQ(a.logits, b.logits);
  ASSERT_EQ(a.traces.size(), b.traces.size());
  for (std::size_t i = 0; i < a.traces.size(); ++i) EXPECT_EQ(a.traces[i].outlier_columns, b.traces[i].outlier_columns);
  EXPECT_NE(forward(init_random(c, 10), imgs).logits, a.logits);
}

TEST(ViTForward, AllHalfPathDiffersOnlyByHalfRounding) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 7);
  const Tensor imgs = random_images(2, c, 8);
  ForwardOptions half;
  half.threshold = QuantThreshold{-std::numeric_limits<float>::infinity(), OutlierTest::magnitude};
  ForwardOptions fp;
  fp.quantized = false;
  const auto a = forward(m, imgs, half);
  const auto b = forward(m, imgs, fp).logits;
  for (const auto& t : a.traces) EXPECT_EQ(t.int8_macs, 0u);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a.logits[i], b[i], 0.02f * (1.0f + std::fabs(b[i])));
}

TEST(Predict, ArgmaxTies) {
  EXPECT_EQ(argmax_rows(Tensor::from_rows({{0.1f, 0.9f}})), std::vector<int>({1}));
  EXPECT_EQ(argmax_rows(Tensor::from_rows({{2, 2, 2}})), std::vector<int>({0}));
}

TEST(InitRandom, WeightsWithinBound) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 3);
  for (std::size_t i = 0; i < m.param_count(); ++i) {
    const std::string& n = m.param_name(i);
    const Tensor& p = m.param(i);
    double bound = 0.0;
    if (n.size() > 2 && n.substr(n.size() - 2) == ".w") bound = std::sqrt(3.0 / static_cast<double>(p.rows()));
    else if (n == "cls" || n == "pos") bound = 0.1;
    else if (n.size() > 2 && n.substr(n.size() - 2) == ".g") bound = 1.0;
    for (float v : p.data()) EXPECT_LE(std::fabs(v), bound) << n;
  }
}

TEST(ScaleQuantInput, PreservesFullPrecisionFunction) {
  const ViTConfig c = small_config();
  ViTModel m = init_random(c, 11);
  const Tensor imgs = random_images(2, c, 12);
  ForwardOptions fp;
  fp.quantized = false;
  fp.capture = true;
  const auto before = forward(m, imgs, fp);
  scale_quant_input(m, 0, QuantSlot::qkv, 4.0f);
  scale_quant_input(m, 1, QuantSlot::proj, 0.5f);
  scale_quant_input(m, 1, QuantSlot::fc1, 3.0f);
  const auto after = forward(m, imgs, fp);
  for (std::size_t i = 0; i < before.logits.size(); ++i) EXPECT_NEAR(after.logits[i], before.logits[i], 1e-4f);
  // Captured inputs scale by the factor.
  const Tensor& x0 = before.captures.states[0];
  const Tensor& x1 = after.captures.states[0];
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x1[i], 4.0f * x0[i], 1e-4f * (1 + std::fabs(x0[i])));
  EXPECT_THROW(scale_quant_input(m, 0, QuantSlot::fc2, 2.0f), ParameterError);
  EXPECT_THROW(scale_quant_input(m, 5, QuantSlot::qkv, 2.0f), ParameterError);
  EXPECT_THROW(scale_quant_input(m, 0, QuantSlot::qkv, 0.0f), ParameterError);
}

TEST(Calibration, HitsTargetColumnCountOnCalibrationSet) {
  const ViTConfig c = small_config();
  ViTModel m = init_random(c, 13);
  const Tensor imgs = random_images(10, c, 14);
  const auto factors = calibrate_quant_inputs(m, imgs, 3.0);
  ASSERT_EQ(factors.size(), 4 * c.num_layers);
  EXPECT_EQ(factors[3], 1.0f);
  ForwardOptions fp;
  fp.quantized = false;
  fp.capture = true;
  const ToyDataset ds{imgs, std::vector<int>(10, 0)};
  // Layers are calibrated in order, so the first layer is exact for the final model.
  std::size_t cols = 0;
  for (std::size_t b = 0; b < 10; ++b) {
    const auto out = forward(m, ds.image(b).reshaped({1, 3, 8, 8}), fp);
    cols += extract_outliers(out.captures.states[0], c.threshold).size();
  }
  EXPECT_EQ(cols, 30u);
}

TEST(WeightFile, RoundTripAndErrors) {
  const ViTConfig c = small_config();
  const ViTModel m = init_random(c, 15);
  const std::string path = temp_path("weights.qtvw");
  save_weights(m, path);
  const ViTModel back = load_weights(path);
  const Tensor imgs = random_images(1, c, 16);
  EXPECT_EQ(forward(m, imgs).logits, forward(back, imgs).logits);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_weights(path), MagicError);
  bad = bytes;
  bad[4] = 9;
  write(bad);
  EXPECT_THROW(load_weights(path), VersionError);
  write(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_weights(path), TruncationError);
  write(bytes + "x");
  EXPECT_THROW(load_weights(path), FormatError);
  std::filesystem::remove(path);
}

TEST(TrainToy, OneEpochReducesLossAndZeroRateKeepsWeights) {
  ToyDatasetSpec spec;
  spec.samples = 10;
  spec.classes = 3;
  spec.image_size = 8;
  const ToyDataset data = generate_toy_dataset(spec);
  const ViTConfig c = small_config();

  ViTModel m = init_random(c, 17);
  ForwardOptions fp;
  auto loss_of = [&](const ViTModel& model) {
    ag::Tape<float> t;
    const auto params = bind_params<float>(t, model, false);
    const auto g = forward_graph<float>(model, params, t.constant(data.images), fp);
    return ag::cross_entropy(g.logits, std::span<const int>(data.labels)).value().item();
  };
  const float before = loss_of(m);
  TrainOptions o;
  o.epochs = 1;
  o.batch_size = 10;
  o.learning_rate = 1e-2;
  o.noise_probability = 0.0;
  train_toy(m, data, o);
  EXPECT_LT(loss_of(m), before);

  ViTModel frozen = init_random(c, 17);
  const ViTModel ref = init_random(c, 17);
  o.learning_rate = 0.0;
  train_toy(frozen, data, o);
  for (std::size_t i = 0; i < ref.param_count(); ++i) EXPECT_EQ(frozen.param(i), ref.param(i));

  EXPECT_THROW(train_toy(frozen, ToyDataset{Tensor({0, 3, 8, 8}), {}}, o), ParameterError);
}

TEST(ToyDataset, DeterministicBalancedInRange) {
  ToyDatasetSpec spec;
  spec.samples = 103;
  const ToyDataset a = generate_toy_dataset(spec);
  const ToyDataset b = generate_toy_dataset(spec);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  std::map<int, int> hist;
  for (int y : a.labels) {
    EXPECT_GE(y, 0);
    EXPECT_LT(y, static_cast<int>(spec.classes));
    ++hist[y];
  }
  int lo = 1 << 30, hi = 0;
  for (const auto& [k, v] : hist) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_EQ(hist.size(), spec.classes);
  EXPECT_LE(hi - lo, 1);
  for (float v : a.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  spec.seed = 8;
  EXPECT_NE(generate_toy_dataset(spec).images, a.images);
}

TEST(ToyDataset, FileRoundTrip) {
  ToyDatasetSpec spec;
  spec.samples = 12;
  const ToyDataset a = generate_toy_dataset(spec);
  const std::string path = temp_path("data.qtvd");
  save_dataset(a, path);
  const ToyDataset b = load_dataset(path);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  std::filesystem::remove(path);
  const auto [train, test] = split_dataset(a, 0.75);
  EXPECT_EQ(train.size(), 9u);
  EXPECT_EQ(test.size(), 3u);
}
