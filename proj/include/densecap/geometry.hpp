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

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "densecap/autodiff.hpp"
#include "densecap/errors.hpp"
#include "densecap/ops.hpp"
#include "densecap/tensor.hpp"

namespace densecap {

/// Axis-aligned box in center form, image pixel units.
struct Box {
  double xc = 0, yc = 0, w = 1, h = 1;

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
  }
  std::array<double, 4> corners() const {
    return {xc - 0.5 * w, yc - 0.5 * h, xc + 0.5 * w, yc + 0.5 * h};
  }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0 && std::isfinite(xc) && std::isfinite(yc); }

  /// Clipped to [0,W] x [0,H]; degenerate results keep a minimal extent.
  Box clipped(double W, double H) const {
    auto [x1, y1, x2, y2] = corners();
    x1 = std::clamp(x1, 0.0, W);
    x2 = std::clamp(x2, 0.0, W);
    y1 = std::clamp(y1, 0.0, H);
    y2 = std::clamp(y2, 0.0, H);
    if (x2 - x1 < 1e-6) x2 = std::min(W, x1 + 1e-6), x1 = x2 - 1e-6;
    if (y2 - y1 < 1e-6) y2 = std::min(H, y1 + 1e-6), y1 = y2 - 1e-6;
    return from_corners(x1, y1, x2, y2);
  }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Offsets of a box relative to an anchor: tx, ty normalized by the anchor
/// extent, tw, th in log space.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

inline Box decode(const Box& anchor, const BoxDelta& d) {
  return Box{anchor.xc + d.tx * anchor.w, anchor.yc + d.ty * anchor.h,
             anchor.w * std::exp(d.tw), anchor.h * std::exp(d.th)};
}

inline BoxDelta encode(const Box& anchor, const Box& target) {
  return BoxDelta{(target.xc - anchor.xc) / anchor.w, (target.yc - anchor.yc) / anchor.h,
                  std::log(target.w / anchor.w), std::log(target.h / anchor.h)};
}

inline double iou(const Box& a, const Box& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double iw = std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]);
  const double ih = std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

/// Sum over the four coordinates of the smooth-L1 penalty.
inline double smooth_l1(const BoxDelta& pred, const BoxDelta& target) {
  return ops::smooth_l1_value(pred.tx - target.tx) + ops::smooth_l1_value(pred.ty - target.ty) +
         ops::smooth_l1_value(pred.tw - target.tw) + ops::smooth_l1_value(pred.th - target.th);
}

// ---------------------------------------------------------------------------
// Anchors

struct AnchorShape {
  double w, h;
};

/// Shapes for every (scale, ratio) pair, scale-major. A ratio r is w:h and
/// preserves the area scale^2.
inline std::vector<AnchorShape> anchor_shapes(std::span<const double> scales,
                                              std::span<const double> ratios) {
  std::vector<AnchorShape> out;
  for (double s : scales)
    for (double r : ratios) {
      require(s > 0 && r > 0, "anchor scale and ratio must be positive");
      out.push_back({s * std::sqrt(r), s / std::sqrt(r)});
    }
  return out;
}

struct AnchorGrid {
  double stride = 16;
  std::vector<AnchorShape> shapes;
  std::size_t grid_w = 0, grid_h = 0;

  std::size_t k() const { return shapes.size(); }
  std::size_t count() const { return grid_w * grid_h * shapes.size(); }
};

/// Anchors in row-major cell order, then shape index. Cell (i, j) is
/// centered at ((j + 0.5) s, (i + 0.5) s).
inline std::vector<Box> generate_anchors(const AnchorGrid& grid) {
  require(grid.stride > 0 && !grid.shapes.empty(), "generate_anchors: invalid grid");
  std::vector<Box> out;
  out.reserve(grid.count());
  for (std::size_t i = 0; i < grid.grid_h; ++i)
    for (std::size_t j = 0; j < grid.grid_w; ++j)
      for (const auto& s : grid.shapes)
        out.push_back(Box{(j + 0.5) * grid.stride, (i + 0.5) * grid.stride, s.w, s.h});
  return out;
}

// ---------------------------------------------------------------------------
// Suppression and sampling

/// Greedy NMS: visit boxes by descending score (lower index first on ties),
/// keep a box unless it overlaps an already kept box with IoU > threshold.
/// Returns at most `keep` indices in visiting order.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                                    double iou_threshold, std::size_t keep) {
  require(boxes.size() == scores.size(), "nms: ", boxes.size(), " boxes vs ", scores.size(),
          " scores");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size() && kept.size() < keep; ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return kept;
}

struct SampledMinibatch {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::vector<std::size_t> matched_gt;  // parallel to positives

  std::size_t size() const { return positives.size() + negatives.size(); }
};

struct SamplingConfig {
  std::size_t batch_size = 256;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
};

/// Positive/negative minibatch selection.
///
/// Positives: IoU >= pos_iou with some ground truth, plus for every ground
/// truth the proposal of maximal IoU with it. Negatives: max IoU < neg_iou
/// and not positive. At most batch_size/2 positives are kept; the forced
/// per-ground-truth positives are taken first so every ground truth keeps a
/// match, the remaining positive and all negative slots are filled uniformly
/// without replacement.
inline SampledMinibatch sample_minibatch(std::span<const Box> proposals,
                                         std::span<const Box> gts, const SamplingConfig& cfg,
                                         std::mt19937_64& rng) {
  require(!gts.empty(), "sample_minibatch: image has no ground-truth boxes");
  const std::size_t N = proposals.size(), G = gts.size();
  SampledMinibatch out;
  if (N == 0) return out;

  std::vector<double> best_iou(N, -1.0);
  std::vector<std::size_t> best_gt(N, 0);
  std::vector<double> ious(N * G);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t g = 0; g < G; ++g) {
      const double v = iou(proposals[i], gts[g]);
      ious[i * G + g] = v;
      if (v > best_iou[i]) best_iou[i] = v, best_gt[i] = g;
    }

  // -1: unlabeled, 0: negative, 1: threshold positive, 2: forced positive
  std::vector<int> label(N, -1);
  std::vector<std::size_t> match(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    if (best_iou[i] >= cfg.pos_iou) label[i] = 1, match[i] = best_gt[i];
    else if (best_iou[i] < cfg.neg_iou) label[i] = 0;
  }
  std::vector<std::size_t> forced;
  for (std::size_t g = 0; g < G; ++g) {
    // Maximal-IoU proposal for this ground truth; if an earlier ground truth
    // already claimed it, the next best unclaimed one.
    std::size_t arg = N;
    for (std::size_t i = 0; i < N; ++i) {
      if (label[i] == 2) continue;
      if (arg == N || ious[i * G + g] > ious[arg * G + g]) arg = i;
    }
    if (arg == N) continue;
    label[arg] = 2;
    match[arg] = g;
    forced.push_back(arg);
  }

  std::vector<std::size_t> pos_pool, neg_pool;
  for (std::size_t i = 0; i < N; ++i) {
    if (label[i] == 1) pos_pool.push_back(i);
    else if (label[i] == 0) neg_pool.push_back(i);
  }
  const std::size_t max_pos = cfg.batch_size / 2;
  for (std::size_t i = 0; i < forced.size() && out.positives.size() < max_pos; ++i)
    out.positives.push_back(forced[i]);
  shuffle(pos_pool.begin(), pos_pool.end(), rng);
  for (std::size_t i = 0; i < pos_pool.size() && out.positives.size() < max_pos; ++i)
    out.positives.push_back(pos_pool[i]);
  for (std::size_t p : out.positives) out.matched_gt.push_back(match[p]);

  const std::size_t n_neg = std::min(neg_pool.size(), cfg.batch_size - out.positives.size());
  shuffle(neg_pool.begin(), neg_pool.end(), rng);
  out.negatives.assign(neg_pool.begin(), neg_pool.begin() + static_cast<std::ptrdiff_t>(n_neg));
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable box transform

/// Row-wise decode of deltas[N,4] against constant anchors; gradient flows
/// into the deltas.
template <typename T>
Var<T> decode_boxes(std::span<const Box> anchors, Var<T> deltas) {
  require(deltas.shape() == Shape{anchors.size(), 4}, "decode_boxes: deltas ",
          shape_str(deltas.shape()), " for ", anchors.size(), " anchors");
  const auto& dv = deltas.value();
  Tensor<T> out(Shape{anchors.size(), 4});
  std::vector<T> scale(anchors.size() * 4);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    const T* d = &dv[i * 4];
    const T ew = std::exp(d[2]) * T(a.w), eh = std::exp(d[3]) * T(a.h);
    out[i * 4 + 0] = T(a.xc) + d[0] * T(a.w);
    out[i * 4 + 1] = T(a.yc) + d[1] * T(a.h);
    out[i * 4 + 2] = ew;
    out[i * 4 + 3] = eh;
    scale[i * 4 + 0] = T(a.w);
    scale[i * 4 + 1] = T(a.h);
    scale[i * 4 + 2] = ew;
    scale[i * 4 + 3] = eh;
  }
  const std::size_t id = deltas.id;
  Tape<T>& tape = *deltas.tape;
  auto self = tape.size();
  return tape.record("decode_boxes", std::move(out), {deltas},
                     [id, self, scale = std::move(scale)](Tape<T>& t) {
                       auto g = t.out_grad(self);
                       auto s = t.grad_sink(id);
                       for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * scale[i];
                     });
}

template <typename T>
Box box_row(const Tensor<T>& boxes, std::size_t i) {
  return Box{double(boxes[i * 4]), double(boxes[i * 4 + 1]), double(boxes[i * 4 + 2]),
             double(boxes[i * 4 + 3])};
}

template <typename T>
std::vector<Box> box_rows(const Tensor<T>& boxes) {
  std::vector<Box> out(boxes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = box_row(boxes, i);
  return out;
}

}  // namespace densecap
