// SPDX-License-Identifier: Apache-2.0
//
// Procedural toy image classification set: one colored geometric shape per
// image on a noisy background. The label is the (shape, color) combination.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "qattack/binary_io.hpp"
#include "qattack/errors.hpp"
#include "qattack/rng.hpp"
#include "qattack/tensor.hpp"

namespace qattack {

struct ToyDatasetSpec {
  std::uint64_t seed = 7;
  std::size_t samples = 2000;
  std::size_t classes = 10;
  std::size_t image_size = 32;
  std::size_t channels = 3;
};

struct ToyDataset {
  Tensor images;  // N x C x H x W, values in [0, 1]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }

  /// Image i as a C x H x W tensor.
  Tensor image(std::size_t i) const {
    const std::size_t n = images.size() / images.dim(0);
    std::vector<float> d(images.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                         images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return Tensor({images.dim(1), images.dim(2), images.dim(3)}, std::move(d));
  }

  ToyDataset subset(const std::vector<std::size_t>& idx) const {
    const std::size_t n = images.size() / images.dim(0);
    ToyDataset out{Tensor({idx.size(), images.dim(1), images.dim(2), images.dim(3)}), {}};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[k] * n), n,
                  out.images.data().begin() + static_cast<std::ptrdiff_t>(k * n));
      out.labels.push_back(labels.at(idx[k]));
    }
    return out;
  }
};

/// Stacks C x H x W images into a B x C x H x W batch.
inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = images.front().shape();
  require_rank(s, 3, "stack_images");
  Tensor out({images.size(), s[0], s[1], s[2]});
  const std::size_t n = images.front().size();
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].shape() != s) throw ShapeError("stack_images: image shapes differ");
    std::copy(images[b].data().begin(), images[b].data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

namespace detail {

inline constexpr std::size_t kShapeCount = 5;

inline constexpr std::array<std::array<float, 3>, 6> kPalette{{
    {0.95f, 0.15f, 0.10f},  // red
    {0.10f, 0.85f, 0.20f},  // green
    {0.15f, 0.30f, 0.95f},  // blue
    {0.95f, 0.90f, 0.10f},  // yellow
    {0.85f, 0.20f, 0.90f},  // magenta
    {0.10f, 0.90f, 0.90f},  // cyan
}};

// Whether pixel (x, y) lies inside `shape` centered at (cx, cy) with half-size r.
inline bool inside_shape(std::size_t shape, float x, float y, float cx, float cy, float r) {
  const float dx = x - cx;
  const float dy = y - cy;
  switch (shape) {
    case 0:  // square
      return std::fabs(dx) <= r && std::fabs(dy) <= r;
    case 1:  // disc
      return dx * dx + dy * dy <= r * r;
    case 2:  // upward triangle
      return dy <= r && dy >= -r && std::fabs(dx) <= (dy + r) * 0.5f;
    case 3:  // plus
      return (std::fabs(dx) <= r * 0.3f && std::fabs(dy) <= r) || (std::fabs(dy) <= r * 0.3f && std::fabs(dx) <= r);
    default: {  // ring
      const float d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.35f * r * r;
    }
  }
}

}  // namespace detail

/// Deterministic: the same spec yields bit-identical tensors. Labels cycle
/// through all classes before shuffling, so class counts differ by at most 1.
inline ToyDataset generate_toy_dataset(const ToyDatasetSpec& spec) {
  if (spec.classes < 2) throw ParameterError("toy dataset needs at least 2 classes");
  if (spec.classes > detail::kShapeCount * detail::kPalette.size()) {
    throw ParameterError("toy dataset supports at most 30 classes");
  }
  if (spec.channels != 3) throw ParameterError("toy dataset renders RGB images only");
  if (spec.image_size < 8) throw ParameterError("toy dataset image_size must be >= 8");
  Rng rng(spec.seed);
  const std::size_t n = spec.samples;
  const std::size_t sz = spec.image_size;
  ToyDataset ds{Tensor({n, 3, sz, sz}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % spec.classes);
  rng.shuffle(ds.labels);

  const float fs = static_cast<float>(sz);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(ds.labels[i]);
    const std::size_t shape = label % detail::kShapeCount;
    const auto& color = detail::kPalette[label / detail::kShapeCount];
    const float r = fs * static_cast<float>(rng.uniform(0.28, 0.40));
    const float cx = static_cast<float>(rng.uniform(r, fs - r));
    const float cy = static_cast<float>(rng.uniform(r, fs - r));
    std::array<float, 3> bg{};
    const float base = static_cast<float>(rng.uniform(0.05, 0.35));
    for (auto& c : bg) c = base + static_cast<float>(rng.uniform(-0.05, 0.05));
    for (std::size_t y = 0; y < sz; ++y) {
      for (std::size_t x = 0; x < sz; ++x) {
        const bool in = detail::inside_shape(shape, static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f,
                                             cx, cy, r);
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = (in ? color[c] : bg[c]) + 0.05f * static_cast<float>(rng.normal());
          ds.images[((i * 3 + c) * sz + y) * sz + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
  }
  return ds;
}

/// First `train_fraction` of the samples for training, the rest held out.
inline std::pair<ToyDataset, ToyDataset> split_dataset(const ToyDataset& ds, double train_fraction = 0.8) {
  const auto n_train = static_cast<std::size_t>(std::round(train_fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < ds.size(); ++i) (i < n_train ? a : b).push_back(i);
  return {ds.subset(a), ds.subset(b)};
}

// ---------------------------------------------------------------------------
// Dataset file: "QTVD", u32 version, u32 N/C/H/W, i32 labels, images (f32 LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetFileVersion = 1;

inline void save_dataset(const ToyDataset& ds, const std::string& path) {
  require_rank(ds.images.shape(), 4, "save_dataset");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_dataset: cannot open " + path);
  io::write_magic(os, "QTVD");
  io::write_u32(os, kDatasetFileVersion);
  for (std::size_t d : ds.images.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
  for (int y : ds.labels) io::write_i32(os, y);
  io::write_f32s(os, ds.images.data());
  if (!os) throw Error("save_dataset: write failed for " + path);
}

inline ToyDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_dataset: cannot open " + path);
  io::Reader rd(is, "dataset file " + path);
  rd.expect_magic("QTVD");
  const std::uint32_t version = rd.u32();
  if (version != kDatasetFileVersion) {
    throw VersionError("dataset file " + path + ": unsupported version " + std::to_string(version));
  }
  Shape shape(4);
  for (auto& d : shape) d = rd.u32();
  if (shape_size(shape) > (std::size_t{1} << 30)) throw FormatError("dataset file " + path + ": absurd shape");
  ToyDataset ds{Tensor(shape), std::vector<int>(shape[0])};
  for (int& y : ds.labels) y = rd.i32();
  rd.f32s(ds.images.data());
  if (!rd.at_end()) throw FormatError("dataset file " + path + ": trailing bytes");
  return ds;
}

}  // namespace qattack
