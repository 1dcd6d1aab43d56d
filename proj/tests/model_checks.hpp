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

#include <random>
#include <vector>

#include "densecap/model.hpp"
#include "grad_check.hpp"

namespace densecap::testing {

/// A model small enough for finite differences over every parameter.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.conv_channels = {3, 4};
  c.pool_after = {0};
  c.anchor_scales = {4, 8};
  c.anchor_ratios = {1.0, 2.0};
  c.rpn_hidden = 4;
  c.roi_width = 3;
  c.roi_height = 3;
  c.fc_hidden = 6;
  c.code_dim = 5;
  c.lm_hidden = 4;
  c.vocab_classes = 5;
  c.init_std = 0.3;
  return c;
}

/// Gradient of a loss on the localization layer's outputs (region features
/// and proposal boxes) w.r.t. the backbone and RPN weights. The region
/// selection is drawn once and then held fixed, so every probe differentiates
/// the same smooth piece up to the tracked kinks.
inline GradCheckResult localization_path_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const DenseCapModel<double> model(tiny_model_config(), seed);
  const Tensor<double> image = random_tensor({3, 12, 14}, rng);
  const std::vector<Box> gts{Box::from_corners(1, 2, 7, 9), Box::from_corners(6, 4, 13, 11)};

  std::vector<std::size_t> selected;
  {
    Tape<double> tape;
    const auto b = model.bind(tape, false);
    auto feats = model.backbone_forward(b, tape.constant(image));
    auto rpn = model.rpn_head(b, feats);
    std::mt19937_64 srng(seed + 1);
    auto rb = model.localization_layer(feats, rpn, &gts, SamplingConfig{8, 0.7, 0.3}, {}, srng);
    selected = rb.anchor_index;
  }

  const ParamLayout& L = model.layout();
  std::vector<std::size_t> which(L.conv_w);
  which.insert(which.end(), L.conv_b.begin(), L.conv_b.end());
  for (std::size_t i : {L.rpn_conv_w, L.rpn_conv_b, L.rpn_out_w, L.rpn_out_b}) which.push_back(i);
  std::vector<Tensor<double>> inputs;
  for (std::size_t i : which) inputs.push_back(model.params()[i].value);

  const auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    Bound<double> b = model.bind(tape, false);
    for (std::size_t k = 0; k < which.size(); ++k) b.vars[which[k]] = v[k];
    auto feats = model.backbone_forward(b, tape.constant(image));
    auto rpn = model.rpn_head(b, feats);
    const auto anchors = generate_anchors(model.anchor_grid(feats.shape()[2], feats.shape()[1]));
    std::vector<Box> chosen;
    for (std::size_t i : selected) chosen.push_back(anchors[i]);
    auto deltas = ops::gather_rows(rpn.deltas, std::span<const std::size_t>(selected));
    auto boxes = decode_boxes(std::span<const Box>(chosen), deltas);
    auto regions = extract_regions(feats, boxes, double(model.config().stride()), 3, 3);
    return ops::add(random_projection(regions, seed + 2), random_projection(boxes, seed + 3));
  };
  return grad_check(inputs, fn, 1e-5, 12, seed);
}

}  // namespace densecap::testing
