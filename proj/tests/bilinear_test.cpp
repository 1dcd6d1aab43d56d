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

#include "densecap/bilinear.hpp"
#include "grad_check.hpp"

namespace densecap {
namespace {

using testing::grad_check;
using testing::random_projection;
using testing::random_tensor;
using V = Var<double>;

Tensor<double> U2x2() { return Tensor<double>(Shape{1, 2, 2}, {1, 2, 3, 4}); }

Var<double> sample_at(Tape<double>& tape, Var<double> U, double x, double y) {
  return bilinear_sample(U, tape.constant(Tensor<double>(Shape{1, 1, 2}, {x, y})));
}

TEST(BuildGrid, AlignedBoxHitsCellCenters) {
  // 3x2 cells starting at cell (row 1, col 2), stride 1.
  const Box box = Box::from_corners(2, 1, 5, 3);
  const auto g = build_grid(box, 1.0, 3, 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(g.x[i * 3 + j], 2.0 + j);
      EXPECT_DOUBLE_EQ(g.y[i * 3 + j], 1.0 + i);
    }
}

TEST(BuildGrid, SinglePointAtBoxCenter) {
  const Box box{37, 21, 12, 8};
  const auto g = build_grid(box, 4.0, 1, 1);
  // Box center divided by the stride, expressed in the index frame.
  EXPECT_DOUBLE_EQ(g.x[0], 37.0 / 4.0 - 0.5);
  EXPECT_DOUBLE_EQ(g.y[0], 21.0 / 4.0 - 0.5);
}

TEST(BuildGrid, SpacingScalesWithWidth) {
  const auto g1 = build_grid(Box{20, 20, 10, 10}, 2.0, 4, 4);
  const auto g2 = build_grid(Box{20, 20, 20, 10}, 2.0, 4, 4);
  EXPECT_DOUBLE_EQ(2 * (g1.x[1] - g1.x[0]), g2.x[1] - g2.x[0]);
  EXPECT_DOUBLE_EQ(g1.y[4] - g1.y[0], g2.y[4] - g2.y[0]);
}

TEST(BilinearSample, PointValuesAndHandGradient) {
  Tape<double> tape;
  auto U = tape.constant(U2x2());
  EXPECT_DOUBLE_EQ(sample_at(tape, U, 0, 0).value().item(), 1.0);
  EXPECT_DOUBLE_EQ(sample_at(tape, U, 1, 0).value().item(), 2.0);
  EXPECT_DOUBLE_EQ(sample_at(tape, U, 0.5, 0.5).value().item(), 2.5);
  // Outside the map the kernel only sees zero padding.
  EXPECT_DOUBLE_EQ(sample_at(tape, U, -0.5, 0).value().item(), 0.5);
  EXPECT_DOUBLE_EQ(sample_at(tape, U, 5, 5).value().item(), 0.0);

  Tape<double> t2;
  auto grid = t2.variable(Tensor<double>(Shape{1, 1, 2}, {0.5, 0.5}));
  auto v = bilinear_sample(t2.constant(U2x2()), grid);
  t2.backward(ops::sum(v));
  const auto g = t2.grad(grid);
  EXPECT_DOUBLE_EQ(g[0], 1.0);  // 0.5 * ((2 - 1) + (4 - 3))
  EXPECT_DOUBLE_EQ(g[1], 2.0);  // 0.5 * ((3 - 1) + (4 - 2))
}

TEST(BilinearSample, KernelDerivativeZeroAtIntegerCoordinates) {
  Tape<double> tape;
  auto grid = tape.variable(Tensor<double>(Shape{1, 1, 2}, {1.0, 0.0}));
  tape.backward(ops::sum(bilinear_sample(tape.constant(U2x2()), grid)));
  EXPECT_EQ(tape.grad(grid).vec(), (std::vector<double>{0.0, 0.0}));
}

TEST(BilinearSample, LinearInFeatures) {
  std::mt19937_64 rng(4);
  const auto u1 = random_tensor({3, 5, 6}, rng), u2 = random_tensor({3, 5, 6}, rng);
  const auto grid = random_tensor({4, 3, 2}, rng, 2.0);
  Tape<double> tape;
  auto gv = tape.constant(grid);
  auto v1 = bilinear_sample(tape.constant(u1), gv).value();
  auto v2 = bilinear_sample(tape.constant(u2), gv).value();
  Tensor<double> mix(u1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.0 * u1[i] - 0.5 * u2[i];
  auto vm = bilinear_sample(tape.constant(mix), gv).value();
  for (std::size_t i = 0; i < vm.size(); ++i) EXPECT_NEAR(vm[i], 2.0 * v1[i] - 0.5 * v2[i], 1e-12);
}

TEST(BilinearSample, ConstantFieldReproducedInside) {
  Tape<double> tape;
  auto U = tape.constant(Tensor<double>(Shape{2, 6, 6}, 3.25));
  std::mt19937_64 rng(9);
  Tensor<double> grid(Shape{5, 5, 2});
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = uniform01(rng) * 5.0;
  for (double v : bilinear_sample(U, tape.constant(grid)).value().data()) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(BilinearSample, FiniteDifferencesBothInputs) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> grid(Shape{3, 4, 2});
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -1.0 + uniform01(rng) * 7.0;
    auto res = grad_check({random_tensor({2, 5, 6}, rng), grid},
                          [](Tape<double>&, const std::vector<V>& v) {
                            return random_projection(bilinear_sample(v[0], v[1]), 3);
                          });
    EXPECT_LT(res.max_rel_error, 1e-6);
  }
}

TEST(ExtractRegions, SingleBoxMatchesBilinearSample) {
  std::mt19937_64 rng(1);
  const auto U = random_tensor({3, 8, 8}, rng);
  const Box box{13, 9, 10, 6};
  Tape<double> tape;
  auto uv = tape.constant(U);
  auto a = extract_regions(uv, tape.constant(Tensor<double>(Shape{1, 4}, {13, 9, 10, 6})), 2.0,
                           4, 3);
  auto b = bilinear_sample(uv, tape.constant(grid_tensor<double>(build_grid(box, 2.0, 4, 3))));
  ASSERT_EQ(a.shape(), (Shape{1, 3, 3, 4}));
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_DOUBLE_EQ(a.value()[i], b.value()[i]);
}

TEST(ExtractRegions, IdenticalBoxesIdenticalSlices) {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  auto U = tape.constant(random_tensor({2, 6, 6}, rng));
  auto out = extract_regions(
      U, tape.constant(Tensor<double>(Shape{2, 4}, {7, 8, 9, 5, 7, 8, 9, 5})), 2.0, 3, 3);
  const std::size_t slice = 2 * 9;
  for (std::size_t i = 0; i < slice; ++i) EXPECT_EQ(out.value()[i], out.value()[slice + i]);
}

TEST(ExtractRegions, TranslationInvariance) {
  std::mt19937_64 rng(3);
  const auto base = random_tensor({2, 10, 10}, rng);
  Tensor<double> shifted(base.shape());
  // shifted(c, y, x) = base(c, y - 1, x - 2)
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 1; y < 10; ++y)
      for (std::size_t x = 2; x < 10; ++x) shifted[(c * 10 + y) * 10 + x] = base[(c * 10 + y - 1) * 10 + x - 2];
  const double s = 4.0;
  Tape<double> tape;
  auto a = extract_regions(tape.constant(base),
                           tape.constant(Tensor<double>(Shape{1, 4}, {14.3, 13.1, 9.5, 7.7})), s, 3, 3);
  auto b = extract_regions(
      tape.constant(shifted),
      tape.constant(Tensor<double>(Shape{1, 4}, {14.3 + 2 * s, 13.1 + 1 * s, 9.5, 7.7})), s, 3, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
}

TEST(ExtractRegions, FiniteDifferencesThroughBoxCoordinates) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> boxes(Shape{3, 4});
    for (std::size_t n = 0; n < 3; ++n) {
      boxes[n * 4 + 0] = 4 + uniform01(rng) * 20;
      boxes[n * 4 + 1] = 4 + uniform01(rng) * 20;
      boxes[n * 4 + 2] = 3 + uniform01(rng) * 15;
      boxes[n * 4 + 3] = 3 + uniform01(rng) * 15;
    }
    auto res = grad_check({random_tensor({2, 7, 7}, rng), boxes},
                          [](Tape<double>&, const std::vector<V>& v) {
                            return random_projection(extract_regions(v[0], v[1], 4.0, 3, 2), 8);
                          });
    EXPECT_LT(res.max_rel_error, 1e-5);
    EXPECT_GT(res.checked, 10u);
  }
}

}  // namespace
}  // namespace densecap
