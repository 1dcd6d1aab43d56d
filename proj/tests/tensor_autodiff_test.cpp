// Copyright 2026 The densecap Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "densecap/autodiff.hpp"
#include "densecap/ops.hpp"
#include "grad_check.hpp"

namespace densecap {
namespace {

using testing::grad_check;
using testing::random_projection;
using testing::random_tensor;
using V = Var<double>;

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ContractError);
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ContractError);
  Tensor<double> t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Conv2d, IdentityKernel) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = ops::conv2d(tape.constant(x), tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, 1.0)),
                       tape.constant(Tensor<double>(Shape{1}, 0.0)), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, DirectSum) {
  Tape<double> tape;
  auto y = ops::conv2d(tape.constant(Tensor<double>(Shape{1, 2, 2}, {1, 2, 3, 4})),
                       tape.constant(Tensor<double>(Shape{1, 1, 2, 2}, 1.0)),
                       tape.constant(Tensor<double>(Shape{1}, 0.0)), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 10.0);
}

TEST(Conv2d, OutputExtentsAndErrors) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 7, 5}, 1.0));
  auto w = tape.constant(Tensor<double>(Shape{3, 2, 3, 3}, 0.0));
  auto b = tape.constant(Tensor<double>(Shape{3}, 0.0));
  EXPECT_EQ(ops::conv2d(x, w, b, 2, 1).shape(), (Shape{3, 4, 3}));
  auto wbad = tape.constant(Tensor<double>(Shape{3, 4, 3, 3}, 0.0));
  EXPECT_THROW(ops::conv2d(x, wbad, b, 1, 1), ContractError);
  EXPECT_THROW(ops::conv2d(x, w, tape.constant(Tensor<double>(Shape{2}, 0.0)), 1, 1),
               ContractError);
}

TEST(Conv2d, SumGradientIsCorrelationWithOnes) {
  // d sum(conv(x, k)) / dx[p] = sum of kernel taps that touch p.
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{1, 3, 3}, 0.5));
  auto w = tape.constant(Tensor<double>(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto y = ops::conv2d(x, w, tape.constant(Tensor<double>(Shape{1}, 0.0)), 1, 1);
  tape.backward(ops::sum(y));
  const auto g = tape.grad(x);
  // Correlation of ones with the flipped kernel: the center pixel sees every
  // tap, the top-left corner only the top-left 2x2 taps.
  EXPECT_DOUBLE_EQ(g[4], 45.0);
  EXPECT_DOUBLE_EQ(g[0], 1 + 2 + 4 + 5);
  EXPECT_DOUBLE_EQ(g[8], 5 + 6 + 8 + 9);
}

TEST(Conv2d, FiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t stride = 1 + trial % 2, pad = trial % 2;
    auto res = grad_check(
        {random_tensor({2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng),
         random_tensor({3}, rng)},
        [&](Tape<double>&, const std::vector<V>& v) {
          return random_projection(ops::conv2d(v[0], v[1], v[2], stride, pad), 99);
        });
    EXPECT_LT(res.max_rel_error, 1e-6);
    EXPECT_GT(res.checked, 0u);
  }
}

TEST(MaxPool, MaxOfFour) {
  Tape<double> tape;
  auto y = ops::maxpool2d(tape.constant(Tensor<double>(Shape{1, 2, 2}, {1, 2, 3, 4})));
  EXPECT_EQ(y.value(), Tensor<double>(Shape{1, 1, 1}, {4}));
}

TEST(MaxPool, TiesRouteToFirstCell) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{1, 4, 4}, 3.0));
  auto y = ops::maxpool2d(x);
  for (double v : y.value().data()) EXPECT_EQ(v, 3.0);
  tape.backward(ops::sum(y));
  const auto g = tape.grad(x);
  const std::vector<double> expected = {1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(g.vec(), expected);
}

TEST(MaxPool, NonDivisibleExtentsRejected) {
  Tape<double> tape;
  EXPECT_THROW(ops::maxpool2d(tape.constant(Tensor<double>(Shape{1, 5, 4}, 0.0))),
               ContractError);
}

TEST(MaxPool, FiniteDifferences) {
  std::mt19937_64 rng(3);
  auto res = grad_check({random_tensor({2, 4, 4}, rng)},
                        [](Tape<double>&, const std::vector<V>& v) {
                          return random_projection(ops::maxpool2d(v[0]), 5);
                        });
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Linear, IdentityAndArithmetic) {
  Tape<double> tape;
  Tensor<double> x(Shape{2, 3}, {1, -2, 3, 4, 5, -6});
  Tensor<double> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::linear(tape.constant(x), tape.constant(eye),
                       tape.constant(Tensor<double>(Shape{3}, 0.0)));
  EXPECT_EQ(y.value(), x);
  auto z = ops::linear(tape.constant(Tensor<double>(Shape{1, 2}, {1, 2})),
                       tape.constant(Tensor<double>(Shape{2, 1}, {1, 1})),
                       tape.constant(Tensor<double>(Shape{1}, 0.0)));
  EXPECT_DOUBLE_EQ(z.value().item(), 3.0);
  EXPECT_THROW(ops::linear(tape.constant(x), tape.constant(Tensor<double>(Shape{2, 2}, 0.0)),
                           tape.constant(Tensor<double>(Shape{2}, 0.0))),
               ContractError);
}

TEST(Linear, FiniteDifferences) {
  std::mt19937_64 rng(5);
  auto res = grad_check(
      {random_tensor({4, 3}, rng), random_tensor({3, 5}, rng), random_tensor({5}, rng)},
      [](Tape<double>&, const std::vector<V>& v) {
        return random_projection(ops::linear(v[0], v[1], v[2]), 1);
      });
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Activations, PointValues) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{3}, {-1.0, 0.0, 2.0}));
  auto r = ops::relu(x);
  EXPECT_EQ(r.value().vec(), (std::vector<double>{0, 0, 2}));
  EXPECT_DOUBLE_EQ(ops::sigmoid(x).value()[1], 0.5);
  EXPECT_DOUBLE_EQ(ops::tanh(x).value()[1], 0.0);
  tape.backward(ops::sum(r));
  // relu'(0) is 0.
  EXPECT_EQ(tape.grad(x).vec(), (std::vector<double>{0, 0, 1}));
}

TEST(Activations, TanhAndSigmoidFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto res = grad_check({random_tensor({10}, rng)}, [](Tape<double>&, const std::vector<V>& v) {
    return random_projection(ops::tanh(v[0]), 2);
  });
  EXPECT_LT(res.max_rel_error, 1e-8);
  res = grad_check({random_tensor({10}, rng)}, [](Tape<double>&, const std::vector<V>& v) {
    return random_projection(ops::sigmoid(v[0]), 2);
  });
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(Dropout, IdentityCases) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = tape.constant(Tensor<double>(Shape{5}, {1, 2, 3, 4, 5}));
  EXPECT_EQ(ops::dropout(x, 0.0, ops::Mode::kTrain, rng).value(), x.value());
  EXPECT_EQ(ops::dropout(x, 0.7, ops::Mode::kEval, rng).value(), x.value());
  EXPECT_THROW(ops::dropout(x, 1.0, ops::Mode::kTrain, rng), ContractError);
}

TEST(Dropout, ExpectationPreserved) {
  std::mt19937_64 rng(2);
  Tensor<double> x(Shape{4}, {1.0, -2.0, 0.5, 3.0});
  std::vector<double> mean(4, 0.0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    Tape<double> tape;
    auto y = ops::dropout(tape.constant(x), 0.5, ops::Mode::kTrain, rng);
    for (int i = 0; i < 4; ++i) mean[i] += y.value()[i] / trials;
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(mean[i], x[i], 0.02 * std::abs(x[i]) + 0.02);
}

TEST(Dropout, MaskReusedInBackward) {
  Tape<double> tape;
  std::mt19937_64 rng(9);
  auto x = tape.variable(Tensor<double>(Shape{64}, 1.0));
  auto y = ops::dropout(x, 0.25, ops::Mode::kTrain, rng);
  tape.backward(ops::sum(y));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(g[i], y.value()[i]);
}

ops::LstmParams<double> lstm_params(Tape<double>& tape, const std::vector<Tensor<double>>& p) {
  return {tape.constant(p[0]), tape.constant(p[1]), tape.constant(p[2])};
}

TEST(Lstm, ZeroEverything) {
  Tape<double> tape;
  const std::size_t D = 3, H = 4;
  auto p = lstm_params(tape, {Tensor<double>(Shape{D, 4 * H}), Tensor<double>(Shape{H, 4 * H}),
                              Tensor<double>(Shape{4 * H})});
  auto st = ops::lstm_step(tape.constant(Tensor<double>(Shape{2, D})),
                           {tape.constant(Tensor<double>(Shape{2, H})),
                            tape.constant(Tensor<double>(Shape{2, H}))},
                           p);
  for (double v : st.h.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : st.c.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, SaturatedForgetGateKeepsCell) {
  Tape<double> tape;
  const std::size_t D = 2, H = 3;
  Tensor<double> bias(Shape{4 * H});
  for (std::size_t j = H; j < 2 * H; ++j) bias[j] = 50.0;
  auto p = lstm_params(tape, {Tensor<double>(Shape{D, 4 * H}), Tensor<double>(Shape{H, 4 * H}),
                              bias});
  Tensor<double> c_prev(Shape{1, H}, {0.3, -1.2, 2.5});
  auto st = ops::lstm_step(tape.constant(Tensor<double>(Shape{1, D}, 1.0)),
                           {tape.constant(Tensor<double>(Shape{1, H})), tape.constant(c_prev)}, p);
  for (std::size_t j = 0; j < H; ++j) EXPECT_NEAR(st.c.value()[j], c_prev[j], 1e-12);
}

TEST(Lstm, FiniteDifferencesAllParameters) {
  std::mt19937_64 rng(21);
  const std::size_t D = 3, H = 4, N = 2;
  auto res = grad_check(
      {random_tensor({N, D}, rng), random_tensor({N, H}, rng), random_tensor({N, H}, rng),
       random_tensor({D, 4 * H}, rng, 0.5), random_tensor({H, 4 * H}, rng, 0.5),
       random_tensor({4 * H}, rng, 0.5)},
      [](Tape<double>&, const std::vector<V>& v) {
        auto st = ops::lstm_step(v[0], {v[1], v[2]}, {v[3], v[4], v[5]});
        return ops::sum(st.h);
      },
      1e-5, 200);
  EXPECT_LT(res.max_rel_error, 1e-5);
  EXPECT_GE(res.checked, 60u);
}

TEST(Lstm, ShapeMismatchRejected) {
  Tape<double> tape;
  auto p = lstm_params(tape, {Tensor<double>(Shape{3, 16}), Tensor<double>(Shape{4, 16}),
                              Tensor<double>(Shape{16})});
  EXPECT_THROW(ops::lstm_step(tape.constant(Tensor<double>(Shape{1, 2})),
                              {tape.constant(Tensor<double>(Shape{1, 4})),
                               tape.constant(Tensor<double>(Shape{1, 4}))},
                              p),
               ContractError);
}

TEST(CrossEntropy, ClosedForms) {
  Tape<double> tape;
  const std::vector<int> targets = {2, 0};
  auto uniform = ops::softmax_cross_entropy(tape.constant(Tensor<double>(Shape{2, 5}, 0.0)),
                                            std::span<const int>(targets));
  EXPECT_NEAR(uniform.value().item(), std::log(5.0), 1e-12);
  Tensor<double> peaked(Shape{1, 5}, 0.0);
  peaked[3] = 1000.0;
  const std::vector<int> t3 = {3};
  EXPECT_NEAR(ops::softmax_cross_entropy(tape.constant(peaked), std::span<const int>(t3))
                  .value()
                  .item(),
              0.0, 1e-12);
  const std::vector<int> bad = {5};
  EXPECT_THROW(ops::softmax_cross_entropy(tape.constant(Tensor<double>(Shape{1, 5}, 0.0)),
                                          std::span<const int>(bad)),
               ContractError);
}

TEST(CrossEntropy, FiniteDifferences) {
  std::mt19937_64 rng(4);
  const std::vector<int> targets = {1, 4, 0};
  auto res = grad_check({random_tensor({3, 5}, rng)}, [&](Tape<double>&, const std::vector<V>& v) {
    return ops::softmax_cross_entropy(v[0], std::span<const int>(targets));
  });
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Backward, SumAndSquare) {
  Tape<double> tape;
  Tensor<double> xv(Shape{3}, {1.0, -2.0, 0.5});
  auto x = tape.variable(xv);
  tape.backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(tape.grad(x).vec(), (std::vector<double>{2.0, -4.0, 1.0}));

  Tape<double> t2;
  auto y = t2.variable(xv);
  t2.backward(ops::sum(y));
  EXPECT_EQ(t2.grad(y).vec(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, DiamondAccumulatesBothPaths) {
  // loss = sum(2x + x*x) -> grad = 2 + 2x
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{2}, {3.0, -1.0}));
  auto loss = ops::sum(ops::add(ops::scale(x, 2.0), ops::mul(x, x)));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x).vec(), (std::vector<double>{8.0, 0.0}));
}

TEST(Backward, UnusedTensorGetsZeroGradient) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{2}, 1.0));
  auto unused = tape.variable(Tensor<double>(Shape{3}, 1.0));
  tape.backward(ops::sum(x));
  EXPECT_EQ(tape.grad(unused).vec(), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, Errors) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x), ContractError);
  auto loss = ops::sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Backward, LinearityOverLossSum) {
  std::mt19937_64 rng(17);
  const auto a = random_tensor({3, 4}, rng);
  const auto w = random_tensor({4, 2}, rng);
  const auto b = random_tensor({2}, rng);
  auto l1 = [](V y) { return ops::sum(ops::tanh(y)); };
  auto l2 = [](V y) { return ops::sum(ops::mul(y, y)); };
  auto run = [&](int which) {
    Tape<double> tape;
    auto wv = tape.variable(w);
    auto y = ops::linear(tape.constant(a), wv, tape.constant(b));
    V loss = which == 0 ? l1(y) : which == 1 ? l2(y) : ops::add(l1(y), l2(y));
    tape.backward(loss);
    return tape.grad(wv);
  };
  const auto g1 = run(0), g2 = run(1), g12 = run(2);
  for (std::size_t i = 0; i < g12.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-12);
}

TEST(Backward, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(123);
    Tape<double> tape;
    auto x = tape.variable(random_tensor({1, 6, 6}, rng));
    auto w = tape.variable(random_tensor({2, 1, 3, 3}, rng));
    auto y = ops::conv2d(x, w, tape.constant(Tensor<double>(Shape{2}, 0.1)), 1, 1);
    auto z = ops::dropout(ops::relu(y), 0.3, ops::Mode::kTrain, rng);
    tape.backward(ops::sum(ops::maxpool2d(z)));
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  EXPECT_EQ(run(), run());
}

TEST(CheckedMode, NonFiniteTrips) {
  Tape<double> tape;
  tape.set_checked(true);
  auto x = tape.constant(Tensor<double>(Shape{1}, 1e308));
  EXPECT_THROW(ops::scale(x, 10.0), NumericError);
}

TEST(Gather, ScatterAddsRepeatedIndices) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>(Shape{3, 2}, {1, 2, 3, 4, 5, 6}));
  const std::vector<std::size_t> rows = {2, 0, 2};
  auto y = ops::gather_rows(x, std::span<const std::size_t>(rows));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{5, 6, 1, 2, 5, 6}));
  tape.backward(ops::sum(y));
  EXPECT_EQ(tape.grad(x).vec(), (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

TEST(Losses, BinaryLogisticAndSmoothL1) {
  Tape<double> tape;
  const std::vector<int> labels = {1, 0, 1};
  auto z = tape.variable(Tensor<double>(Shape{3}, 0.0));
  auto l = ops::binary_logistic(z, std::span<const int>(labels));
  EXPECT_NEAR(l.value().item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(ops::smooth_l1_value(0.5), 0.125, 1e-15);
  EXPECT_NEAR(ops::smooth_l1_value(2.0), 1.5, 1e-15);
  EXPECT_EQ(ops::smooth_l1_value(0.0), 0.0);
  EXPECT_EQ(ops::smooth_l1_slope(1.0), 1.0);
  EXPECT_EQ(ops::smooth_l1_slope(-1.0), -1.0);

  std::mt19937_64 rng(6);
  auto res = grad_check({random_tensor({6}, rng, 3.0)}, [&](Tape<double>&, const std::vector<V>& v) {
    const std::vector<int> lab = {1, 0, 0, 1, 1, 0};
    return ops::binary_logistic(v[0], std::span<const int>(lab));
  });
  EXPECT_LT(res.max_rel_error, 1e-7);
  const auto target = random_tensor({3, 4}, rng);
  res = grad_check({random_tensor({3, 4}, rng, 2.0)}, [&](Tape<double>&, const std::vector<V>& v) {
    return ops::smooth_l1_loss(v[0], target);
  });
  EXPECT_LT(res.max_rel_error, 1e-6);
}

}  // namespace
}  // namespace densecap
