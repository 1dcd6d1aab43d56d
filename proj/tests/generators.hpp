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

#pragma once

// Random inputs shared by the unit and acceptance suites.

#include <random>
#include <string>
#include <vector>

#include "densecap/evaluation.hpp"
#include "densecap/geometry.hpp"

namespace densecap::testing {

inline Box random_box(std::mt19937_64& rng, double extent = 100.0) {
  return Box{uniform01(rng) * extent, uniform01(rng) * extent, 1.0 + uniform01(rng) * 40.0,
             1.0 + uniform01(rng) * 40.0};
}

/// A few images of overlapping boxes and short captions from a small word list.
inline std::vector<EvalImage> random_scene_set(std::mt19937_64& rng) {
  static const char* words[] = {"red", "blue", "circle", "square", "small", "large"};
  auto caption = [&] {
    std::string s;
    const std::size_t n = 1 + uniform_index(rng, 3);
    for (std::size_t i = 0; i < n; ++i) s += std::string(i ? " " : "") + words[uniform_index(rng, 6)];
    return s;
  };
  std::vector<EvalImage> out(1 + uniform_index(rng, 3));
  for (auto& e : out) {
    const std::size_t G = 1 + uniform_index(rng, 4);
    for (std::size_t g = 0; g < G; ++g) {
      const double x = uniform01(rng) * 40, y = uniform01(rng) * 40;
      MergedGroundTruth m;
      m.box = Box::from_corners(x, y, x + 8 + uniform01(rng) * 16, y + 8 + uniform01(rng) * 16);
      m.references.push_back(caption());
      if (uniform_index(rng, 3) == 0) m.references.push_back(caption());
      e.ground_truth.push_back(m);
    }
    const std::size_t P = uniform_index(rng, 6);
    for (std::size_t p = 0; p < P; ++p) {
      const Box& g = e.ground_truth[uniform_index(rng, G)].box;
      const Box b{g.xc + (uniform01(rng) - 0.5) * g.w, g.yc + (uniform01(rng) - 0.5) * g.h,
                  g.w * (0.6 + 0.8 * uniform01(rng)), g.h * (0.6 + 0.8 * uniform01(rng))};
      // coarse confidences so ties occur
      e.predictions.push_back({b, caption(), double(uniform_index(rng, 4)) / 4.0});
    }
  }
  return out;
}

}  // namespace densecap::testing
