// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qattack/autograd.hpp"

using namespace qattack;
using ag::Tape;
using ag::Var;
using DTensor = BasicTensor<double>;

namespace {

constexpr double kTol = 1e-4;

DTensor uniform(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  DTensor t(shape);
  for (auto& v : t.data()) v = u(gen);
  return t;
}

// Contracts a tensor-valued op with fixed random weights so every output
// coordinate contributes to the scalar root.
Var<double> weighted(Tape<double>& t, Var<double> y, const DTensor& w) {
  return ag::sum(ag::mul(y, t.constant(w)));
}

struct PrimitiveCase {
  std::string name;
  Shape input;
  std::function<Var<double>(Tape<double>&, Var<double>)> op;  // tensor-valued
  double lo = -1.0;
  double hi = 1.0;
};

}  // namespace

TEST(Autograd, RecordsValues) {
  Tape<double> t;
  auto c = t.constant(DTensor::scalar(2.0));
  auto y = ag::square(c);
  EXPECT_EQ(y.value().item(), 4.0);
  EXPECT_FALSE(t.requires_grad(y.id));
  auto x = t.variable(DTensor::scalar(3.0));
  auto z = ag::square(x);
  EXPECT_EQ(z.value().item(), 9.0);
  t.backward(z);
  EXPECT_EQ(t.grad(x).item(), 6.0);
}

TEST(Autograd, InactiveHingeHasZeroGradient) {
  Tape<double> t;
  auto x = t.variable(DTensor::scalar(5.0));
  // max(c - x, 0)^2 with c = 2 < x
  auto r = ag::square(ag::maximum(ag::add_scalar(ag::scale(x, -1.0), 2.0), 0.0));
  t.backward(r);
  EXPECT_EQ(t.grad(x).item(), 0.0);
}

TEST(Autograd, NonScalarRootRejected) {
  Tape<double> t;
  auto x = t.variable(DTensor({2}, std::vector<double>{1, 2}));
  EXPECT_THROW(t.backward(x), ParameterError);
}

TEST(Autograd, RepeatedBackwardIsStateless) {
  std::mt19937_64 gen(1);
  Tape<double> t;
  auto x = t.variable(uniform({3, 4}, gen));
  auto w = t.constant(uniform({4, 2}, gen));
  auto r = ag::sum(ag::gelu(ag::matmul(x, w)));
  t.backward(r);
  const DTensor g1 = t.grad(x);
  t.backward(r);
  EXPECT_EQ(t.grad(x), g1);
}

TEST(Autograd, SoftmaxWeightedSumMatchesFiniteDifferences) {
  std::mt19937_64 gen(2);
  const DTensor w = uniform({1, 5}, gen);
  auto f = [&](Tape<double>& t, Var<double> x) { return weighted(t, ag::softmax_rows(x), w); };
  EXPECT_LE(ag::finite_diff_check(f, uniform({1, 5}, gen)), 1e-6);
}

TEST(Autograd, SoftmaxMeanHasZeroGradient) {
  std::mt19937_64 gen(3);
  Tape<double> t;
  auto x = t.variable(uniform({1, 5}, gen));
  t.backward(ag::mean(ag::softmax_rows(x)));
  for (double g : t.grad(x).data()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(FiniteDiffCheck, Examples) {
  std::mt19937_64 gen(4);
  const DTensor w = uniform({6}, gen);
  auto linear = [&](Tape<double>& t, Var<double> x) { return ag::add_scalar(weighted(t, x, w), 3.0); };
  EXPECT_LT(ag::finite_diff_check(linear, uniform({6}, gen)), 1e-9);

  auto sq = [](Tape<double>&, Var<double> x) { return ag::sum(ag::square(x)); };
  EXPECT_LT(ag::finite_diff_check(sq, DTensor::scalar(1.0), 1e-5), 1e-8);

  // Hinge max(x - 2, 0)^2 evaluated exactly at its kink: the coordinate is
  // skipped, so the check reports nothing.
  auto hinge = [](Tape<double>&, Var<double> x) {
    return ag::sum(ag::square(ag::maximum(ag::add_scalar(x, -2.0), 0.0)));
  };
  const DTensor kink({1}, std::vector<double>{2.0});
  EXPECT_EQ(ag::finite_diff_check(hinge, kink, 1e-5, [](std::size_t) { return true; }), 0.0);
}

TEST(Autograd, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 gen(5);
  const DTensor m34 = uniform({3, 4}, gen);
  const DTensor gamma = uniform({5}, gen, 0.5, 1.5);
  const DTensor beta = uniform({5}, gen);
  const DTensor m35 = uniform({3, 5}, gen);
  const DTensor m43 = m34.reshaped({4, 3});
  const DTensor bias3 = uniform({3}, gen);
  const QuantLinearLayer layer43("l", m43.cast<float>(), bias3.cast<float>());

  std::vector<PrimitiveCase> cases = {
      {"matmul", {2, 3}, [&](Tape<double>& t, Var<double> x) { return ag::matmul(x, t.constant(m34)); }},
      {"matmul_rhs", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::matmul(t.constant(m43), x);
       }},
      {"add", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::add(x, ag::square(x)); }},
      {"sub", {3, 4}, [&](Tape<double>& t, Var<double> x) { return ag::sub(t.constant(m34), ag::square(x)); }},
      {"mul", {3, 4}, [&](Tape<double>& t, Var<double> x) { return ag::mul(x, ag::add(x, t.constant(m34))); }},
      {"scale", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::scale(ag::square(x), -2.5); }},
      {"add_scalar", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::square(ag::add_scalar(x, 0.7)); }},
      {"square", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::square(x); }},
      {"sqrt_smooth", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::sqrt_smooth(ag::square(x), 1e-8); },
       0.1, 1.0},
      {"mean", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::reshape(ag::mean(ag::square(x)), {1}); }},
      {"sum", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::reshape(ag::sum(ag::square(x)), {1}); }},
      {"maximum", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::maximum(x, 0.0); }},
      {"clamp", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::clamp(x, -0.5, 0.5); }},
      {"transpose", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::matmul(ag::transpose(x), t.constant(m34));
       }},
      {"reshape", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::matmul(ag::reshape(x, {4, 3}), t.constant(m34));
       }},
      {"crop", {2, 3, 4}, [](Tape<double>&, Var<double> x) { return ag::crop(x, {1, 0, 1}, {1, 2, 3}); }},
      {"concat_rows", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::concat(std::vector<Var<double>>{x, ag::square(x), t.constant(m34)}, 0);
       }},
      {"concat_cols", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::concat(std::vector<Var<double>>{ag::slice_cols(x, 0, 1), t.constant(m34), ag::slice_cols(x, 1, 4)}, 1);
       }},
      {"add_broadcast", {4}, [&](Tape<double>& t, Var<double> x) {
         return ag::square(ag::add_broadcast(t.constant(m34), x));
       }},
      {"add_broadcast_matrix", {1, 4}, [&](Tape<double>& t, Var<double> x) {
         return ag::square(ag::add_broadcast(t.constant(m34), x));
       }},
      {"layer_norm_x", {3, 5}, [&](Tape<double>& t, Var<double> x) {
         return ag::layer_norm(x, t.constant(gamma), t.constant(beta));
       }},
      {"layer_norm_gamma", {5}, [&](Tape<double>& t, Var<double> g) {
         return ag::layer_norm(t.constant(m35), g, t.constant(beta));
       }},
      {"layer_norm_beta", {5}, [&](Tape<double>& t, Var<double> b) {
         return ag::square(ag::layer_norm(t.constant(m35), t.constant(gamma), b));
       }},
      {"softmax", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::softmax_rows(x); }},
      {"gelu", {3, 4}, [](Tape<double>&, Var<double> x) { return ag::gelu(x); }, -3.0, 3.0},
      {"topk", {6, 4}, [](Tape<double>&, Var<double> x) { return ag::topk_columns(x, 3); }},
      {"patches", {2, 3, 4, 4}, [](Tape<double>&, Var<double> x) { return ag::extract_patches(x, 2); }},
      {"quant_linear", {3, 4}, [&](Tape<double>& t, Var<double> x) {
         ag::LinearExec exec;
         exec.quantized = false;
         return ag::quant_linear(x, t.constant(m43), t.constant(bias3), layer43, exec);
       }},
  };

  for (auto& pc : cases) {
    // Each op gets its own fixed random contraction weights.
    Tape<double> probe;
    const Shape out_shape = pc.op(probe, probe.constant(uniform(pc.input, gen, pc.lo, pc.hi))).shape();
    const DTensor w = uniform(out_shape, gen);
    auto f = [&](Tape<double>& t, Var<double> x) { return weighted(t, pc.op(t, x), w); };
    for (int point = 0; point < 10; ++point) {
      const DTensor x = uniform(pc.input, gen, pc.lo, pc.hi);
      auto near_kink = [&](std::size_t i) {
        const double v = x[i];
        if (pc.name == "maximum") return std::fabs(v) < 1e-3;
        if (pc.name == "clamp") return std::fabs(std::fabs(v) - 0.5) < 1e-3;
        return false;
      };
      EXPECT_LE(ag::finite_diff_check(f, x, 1e-5, near_kink), kTol) << pc.name << " point " << point;
    }
  }
}

TEST(Autograd, CrossEntropyMatchesFiniteDifferences) {
  std::mt19937_64 gen(6);
  const std::vector<int> labels{2, 0, 3};
  auto f = [&](Tape<double>&, Var<double> x) { return ag::cross_entropy<double>(x, labels); };
  for (int point = 0; point < 10; ++point) EXPECT_LE(ag::finite_diff_check(f, uniform({3, 4}, gen, -3, 3)), kTol);
  Tape<double> t;
  const std::vector<int> bad{5, 0, 0};
  EXPECT_THROW(ag::cross_entropy<double>(t.constant(uniform({3, 4}, gen)), bad), ParameterError);
}

TEST(Autograd, TopkGradientOnlyAtSelectedPositions) {
  std::mt19937_64 gen(7);
  const DTensor xv = uniform({7, 5}, gen);
  Tape<double> t;
  auto x = t.variable(xv);
  t.backward(ag::sum(ag::topk_columns(x, 2)));
  const auto idx = topk_column_indices(xv, 2);
  const DTensor& g = t.grad(x);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool selected = idx(0, c) == r || idx(1, c) == r;
      EXPECT_EQ(g(r, c), selected ? 1.0 : 0.0);
    }
}

TEST(Autograd, StraightThroughMatchesFullPrecisionGradient) {
  std::mt19937_64 gen(8);
  const Tensor w = uniform({6, 3}, gen).cast<float>();
  const Tensor b({3});
  QuantLinearLayer layer("l", w, b);
  Tensor xv = uniform({4, 6}, gen, -10, 10).cast<float>();
  xv(0, 2) = 30.0f;
  const Tensor wout = uniform({4, 3}, gen).cast<float>();

  auto grad_of = [&](bool quantized) {
    Tape<float> t;
    auto x = t.variable(xv);
    ag::LinearExec exec;
    exec.quantized = quantized;
    auto y = ag::quant_linear(x, t.constant(w), t.constant(b), layer, exec);
    t.backward(ag::sum(ag::mul(y, t.constant(wout))));
    return t.grad(x);
  };
  Tape<float> t;
  auto x = t.variable(xv);
  t.backward(ag::sum(ag::mul(ag::matmul(x, t.constant(w)), t.constant(wout))));
  const Tensor ref = t.grad(x);
  EXPECT_EQ(grad_of(true), grad_of(false));
  const Tensor q = grad_of(true);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(q[i], ref[i], 1e-5f);
}

TEST(Autograd, QuantizedForwardRecordsTrace) {
  std::mt19937_64 gen(9);
  const Tensor w = uniform({4, 2}, gen).cast<float>();
  QuantLinearLayer layer("probe", w, Tensor({2}));
  std::vector<MatmulTrace> traces;
  ag::LinearExec exec;
  exec.traces = &traces;
  Tape<float> t;
  Tensor xv({3, 4});
  xv(1, 3) = 9.0f;
  ag::quant_linear(t.constant(xv), t.constant(w), t.constant(Tensor({2})), layer, exec);
  ASSERT_EQ(traces.size(), 1u);
  EXPECT_EQ(traces[0].layer_id, "probe");
  EXPECT_EQ(traces[0].outlier_columns, ColumnSet({3}));
}

TEST(Autograd, ShapeErrors) {
  Tape<double> t;
  auto a = t.variable(DTensor({2, 3}));
  auto b = t.variable(DTensor({2, 3}));
  EXPECT_THROW(ag::matmul(a, b), ShapeError);
  EXPECT_THROW(ag::add(a, t.variable(DTensor({3, 2}))), ShapeError);
  EXPECT_THROW(ag::crop(a, {1, 1}, {2, 2}), ShapeError);
  EXPECT_THROW(ag::extract_patches(t.variable(DTensor({1, 1, 3, 3})), 2), ShapeError);
}
