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

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "densecap/autodiff.hpp"
#include "densecap/errors.hpp"
#include "densecap/geometry.hpp"
#include "densecap/tensor.hpp"

// Differentiable fixed-size feature extraction from boxes.
//
// Coordinates are in the feature map's index frame: the center of cell
// (row i, column j) sits at (x = j, y = i). A box in image pixels is mapped
// to this frame by dividing by the stride and shifting by half a cell.
// Sampling uses the triangle kernel k(d) = max(0, 1 - |d|) summed over all
// cells, so points beyond the border see zeros.

namespace densecap {

struct SamplingGrid {
  std::size_t out_w = 0, out_h = 0;
  std::vector<double> x;  // out_h * out_w, row-major
  std::vector<double> y;
};

/// Sample points at the centers of an out_h x out_w subdivision of `box`.
inline SamplingGrid build_grid(const Box& box, double stride, std::size_t out_w,
                               std::size_t out_h) {
  require(out_w >= 1 && out_h >= 1, "build_grid: grid extents must be >= 1");
  require(stride > 0, "build_grid: stride must be positive");
  SamplingGrid g{out_w, out_h, std::vector<double>(out_w * out_h),
                 std::vector<double>(out_w * out_h)};
  const double x0 = (box.xc - 0.5 * box.w) / stride - 0.5;
  const double y0 = (box.yc - 0.5 * box.h) / stride - 0.5;
  const double dx = box.w / stride / double(out_w);
  const double dy = box.h / stride / double(out_h);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      g.x[i * out_w + j] = x0 + (double(j) + 0.5) * dx;
      g.y[i * out_w + j] = y0 + (double(i) + 0.5) * dy;
    }
  return g;
}

namespace detail {

// Triangle kernel and its derivative w.r.t. the sample coordinate; the
// derivative is 0 at |d| in {0, 1}.
inline double tri(double d) { return std::max(0.0, 1.0 - std::abs(d)); }
inline double tri_dcoord(double cell, double coord) {
  const double d = cell - coord;
  const double a = std::abs(d);
  if (a == 0.0 || a >= 1.0) return 0.0;
  return d > 0 ? 1.0 : -1.0;
}

struct Support {
  long x0, y0;             // lower supporting cell
  double kx[2], ky[2];     // weights of cells x0, x0+1 / y0, y0+1
  double dkx[2], dky[2];   // derivatives w.r.t. x / y
};

inline Support support(double x, double y) {
  Support s;
  s.x0 = static_cast<long>(std::floor(x));
  s.y0 = static_cast<long>(std::floor(y));
  for (int a = 0; a < 2; ++a) {
    s.kx[a] = tri(double(s.x0 + a) - x);
    s.ky[a] = tri(double(s.y0 + a) - y);
    s.dkx[a] = tri_dcoord(double(s.x0 + a), x);
    s.dky[a] = tri_dcoord(double(s.y0 + a), y);
  }
  return s;
}

inline std::uint64_t kink_code(double x, double y) {
  const auto fx = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(x)) + (1 << 20));
  const auto fy = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(y)) + (1 << 20));
  const std::uint64_t exact = (x == std::floor(x) ? 1u : 0u) | (y == std::floor(y) ? 2u : 0u);
  return (fx << 34) ^ (fy << 4) ^ exact;
}

// out[c * pix + p] for every channel at one sample point.
template <typename T>
void sample_forward(const T* U, std::size_t C, std::size_t H, std::size_t W, double x, double y,
                    T* out, std::size_t out_stride) {
  const Support s = support(x, y);
  for (std::size_t c = 0; c < C; ++c) out[c * out_stride] = T(0);
  for (int b = 0; b < 2; ++b) {
    const long yy = s.y0 + b;
    if (yy < 0 || yy >= long(H) || s.ky[b] == 0.0) continue;
    for (int a = 0; a < 2; ++a) {
      const long xx = s.x0 + a;
      if (xx < 0 || xx >= long(W) || s.kx[a] == 0.0) continue;
      const T w = T(s.kx[a] * s.ky[b]);
      const T* src = U + std::size_t(yy) * W + std::size_t(xx);
      for (std::size_t c = 0; c < C; ++c) out[c * out_stride] += w * src[c * H * W];
    }
  }
}

// Accumulates dU and returns (dL/dx, dL/dy) for one sample point given the
// upstream gradient g[c * g_stride].
template <typename T>
std::pair<double, double> sample_backward(const T* U, T* dU, std::size_t C, std::size_t H,
                                          std::size_t W, double x, double y, const T* g,
                                          std::size_t g_stride) {
  const Support s = support(x, y);
  double gx = 0, gy = 0;
  for (int b = 0; b < 2; ++b) {
    const long yy = s.y0 + b;
    if (yy < 0 || yy >= long(H)) continue;
    for (int a = 0; a < 2; ++a) {
      const long xx = s.x0 + a;
      if (xx < 0 || xx >= long(W)) continue;
      const std::size_t off = std::size_t(yy) * W + std::size_t(xx);
      double dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += double(g[c * g_stride]) * double(U[off + c * H * W]);
      gx += dot * s.dkx[a] * s.ky[b];
      gy += dot * s.kx[a] * s.dky[b];
      if (dU) {
        const T w = T(s.kx[a] * s.ky[b]);
        if (w != T(0))
          for (std::size_t c = 0; c < C; ++c) dU[off + c * H * W] += w * g[c * g_stride];
      }
    }
  }
  return {gx, gy};
}

}  // namespace detail

/// V[C, out_h, out_w] from U[C, H, W] at the points of `grid`, where grid is
/// an out_h x out_w x 2 tensor of (x, y) pairs in the index frame. Gradients
/// flow to U and to the grid coordinates.
template <typename T>
Var<T> bilinear_sample(Var<T> U, Var<T> grid) {
  const Shape& us = U.shape();
  const Shape& gs = grid.shape();
  require(us.size() == 3, "bilinear_sample: U must be C x H x W, got ", shape_str(us));
  require(gs.size() == 3 && gs[2] == 2, "bilinear_sample: grid must be Y x X x 2, got ",
          shape_str(gs));
  const std::size_t C = us[0], H = us[1], W = us[2], oh = gs[0], ow = gs[1], pix = oh * ow;
  const auto& gv = grid.value();
  const T* u = U.value().data().data();
  Tensor<T> out(Shape{C, oh, ow});
  Tape<T>& tape = *U.tape;
  std::uint64_t kinks = 0x9abc;
  for (std::size_t p = 0; p < pix; ++p) {
    const double x = double(gv[2 * p]), y = double(gv[2 * p + 1]);
    if (!std::isfinite(x) || !std::isfinite(y)) throw NumericError("bilinear_sample: non-finite grid");
    detail::sample_forward(u, C, H, W, x, y, &out[p], pix);
    if (tape.tracks_kinks()) kinks = ops::detail::mix64(kinks, detail::kink_code(x, y));
  }
  if (tape.tracks_kinks()) tape.mix_kink(kinks);
  const std::size_t iu = U.id, ig = grid.id;
  auto self = tape.size();
  return tape.record("bilinear_sample", std::move(out), {U, grid}, [=](Tape<T>& t) {
    const T* g = t.out_grad(self).data();
    const auto& gv = t.value(ig);
    const T* u = t.value(iu).data().data();
    auto su = t.grad_sink(iu);
    auto sg = t.grad_sink(ig);
    for (std::size_t p = 0; p < pix; ++p) {
      const auto [dx, dy] = detail::sample_backward(u, su.empty() ? nullptr : su.data(), C, H, W,
                                                    double(gv[2 * p]), double(gv[2 * p + 1]),
                                                    g + p, pix);
      if (!sg.empty()) {
        sg[2 * p] += T(dx);
        sg[2 * p + 1] += T(dy);
      }
    }
  });
}

/// Grid of `box` as an out_h x out_w x 2 constant tensor.
template <typename T>
Tensor<T> grid_tensor(const SamplingGrid& g) {
  Tensor<T> t(Shape{g.out_h, g.out_w, 2});
  for (std::size_t p = 0; p < g.x.size(); ++p) {
    t[2 * p] = T(g.x[p]);
    t[2 * p + 1] = T(g.y[p]);
  }
  return t;
}

/// Features for B boxes[B,4] (center form, image pixels) from U[C,H,W]:
/// out[B, C, out_h, out_w]. Gradients flow to U and to the box coordinates.
template <typename T>
Var<T> extract_regions(Var<T> U, Var<T> boxes, double stride, std::size_t out_w,
                       std::size_t out_h) {
  const Shape& us = U.shape();
  require(us.size() == 3, "extract_regions: U must be C x H x W, got ", shape_str(us));
  require(boxes.shape().size() == 2 && boxes.shape()[1] == 4 && boxes.shape()[0] >= 1,
          "extract_regions: boxes must be B x 4, got ", shape_str(boxes.shape()));
  const std::size_t B = boxes.shape()[0], C = us[0], H = us[1], W = us[2];
  const std::size_t pix = out_w * out_h;
  const auto& bv = boxes.value();
  const T* u = U.value().data().data();
  Tensor<T> out(Shape{B, C, out_h, out_w});
  Tape<T>& tape = *U.tape;
  std::uint64_t kinks = 0xdef0;
  for (std::size_t n = 0; n < B; ++n) {
    const SamplingGrid g = build_grid(box_row(bv, n), stride, out_w, out_h);
    T* dst = &out[n * C * pix];
    for (std::size_t p = 0; p < pix; ++p) {
      if (!std::isfinite(g.x[p]) || !std::isfinite(g.y[p]))
        throw NumericError("extract_regions: non-finite box");
      detail::sample_forward(u, C, H, W, g.x[p], g.y[p], dst + p, pix);
      if (tape.tracks_kinks()) kinks = ops::detail::mix64(kinks, detail::kink_code(g.x[p], g.y[p]));
    }
  }
  if (tape.tracks_kinks()) tape.mix_kink(kinks);
  const std::size_t iu = U.id, ib = boxes.id;
  auto self = tape.size();
  return tape.record("extract_regions", std::move(out), {U, boxes}, [=](Tape<T>& t) {
    const T* g = t.out_grad(self).data();
    const auto& bv = t.value(ib);
    const T* u = t.value(iu).data().data();
    auto su = t.grad_sink(iu);
    auto sb = t.grad_sink(ib);
    for (std::size_t n = 0; n < B; ++n) {
      const SamplingGrid grid = build_grid(box_row(bv, n), stride, out_w, out_h);
      double dxc = 0, dyc = 0, dw = 0, dh = 0;
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t p = i * out_w + j;
          const auto [gx, gy] = detail::sample_backward(
              u, su.empty() ? nullptr : su.data(), C, H, W, grid.x[p], grid.y[p],
              g + n * C * pix + p, pix);
          // x = (xc - w/2)/s + (j + 0.5) (w/s) / out_w - 0.5
          dxc += gx / stride;
          dw += gx * (-0.5 + (double(j) + 0.5) / double(out_w)) / stride;
          dyc += gy / stride;
          dh += gy * (-0.5 + (double(i) + 0.5) / double(out_h)) / stride;
        }
      if (!sb.empty()) {
        sb[n * 4 + 0] += T(dxc);
        sb[n * 4 + 1] += T(dyc);
        sb[n * 4 + 2] += T(dw);
        sb[n * 4 + 3] += T(dh);
      }
    }
  });
}

}  // namespace densecap
