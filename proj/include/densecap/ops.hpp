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
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "densecap/autodiff.hpp"
#include "densecap/errors.hpp"
#include "densecap/gemm.hpp"
#include "densecap/tensor.hpp"

namespace densecap {

/// Uniform double in [0, 1) from the raw engine output. Independent of the
/// standard library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on `uniform01`.
inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Fisher-Yates with `uniform_index`, so shuffles are reproducible across
/// standard library implementations.
template <typename It>
void shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[uniform_index(rng, i)]);
}

namespace ops {

namespace detail {

inline std::uint64_t mix64(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

template <typename T>
void check_same_shape(const char* op, Var<T> a, Var<T> b) {
  require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()),
          " vs ", shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_shape("add", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("add", std::move(out), {a, b}, [ia, ib, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    for (std::size_t id : {ia, ib}) {
      auto s = t.grad_sink(id);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_shape("sub", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id, ib = b.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("sub", std::move(out), {a, b}, [ia, ib, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    auto sa = t.grad_sink(ia);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
    auto sb = t.grad_sink(ib);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_shape("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("mul", std::move(out), {a, b}, [ia, ib, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    auto sa = t.grad_sink(ia);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i] * bv[i];
    auto sb = t.grad_sink(ib);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ia = a.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("scale", std::move(out), {a}, [ia, self, factor](Tape<T>& t) {
    auto g = t.out_grad(self);
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
  });
}

/// Sum of all elements, as a one-element tensor.
template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T acc = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  const std::size_t ia = a.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("sum", Tensor<T>::scalar(acc), {a}, [ia, self](Tape<T>& t) {
    const T g = t.out_grad(self)[0];
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g;
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  Tape<T>& tape = *x.tape;
  if (tape.tracks_kinks()) {
    std::uint64_t h = 0x1234;
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T(0)) h = detail::mix64(h, i);
    tape.mix_kink(h);
  }
  const std::size_t ix = x.id;
  auto self = tape.size();
  // relu'(0) = 0
  return tape.record("relu", std::move(out), {x}, [ix, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    const auto& xv = t.value(ix);
    auto s = t.grad_sink(ix);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (xv[i] > T(0)) s[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const std::size_t ix = x.id;
  Tape<T>& tape = *x.tape;
  auto self = tape.size();
  return tape.record("sigmoid", std::move(out), {x}, [ix, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    const auto& y = t.value(self);
    auto s = t.grad_sink(ix);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  const std::size_t ix = x.id;
  Tape<T>& tape = *x.tape;
  auto self = tape.size();
  return tape.record("tanh", std::move(out), {x}, [ix, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    const auto& y = t.value(self);
    auto s = t.grad_sink(ix);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

enum class Mode { kTrain, kEval };

/// Inverted dropout: survivors are scaled by 1/(1-p) at train time so eval
/// mode is the identity.
template <typename T>
Var<T> dropout(Var<T> x, double p, Mode mode, std::mt19937_64& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1), got ", p);
  if (mode == Mode::kEval || p == 0.0) return x;
  const auto& xv = x.value();
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(xv.size());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = uniform01(rng) < p ? T(0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  const std::size_t ix = x.id;
  Tape<T>& tape = *x.tape;
  auto self = tape.size();
  return tape.record("dropout", std::move(out), {x},
                     [ix, self, mask = std::move(mask)](Tape<T>& t) {
                       auto g = t.out_grad(self);
                       auto s = t.grad_sink(ix);
                       for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * mask[i];
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  require(shape_numel(shape) == x.size(), "reshape: ", shape_str(x.shape()), " -> ",
          shape_str(shape));
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  Tape<T>& tape = *x.tape;
  auto self = tape.size();
  return tape.record("reshape", std::move(out), {x}, [ix, self](Tape<T>& t) {
    auto g = t.out_grad(self);
    auto s = t.grad_sink(ix);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
  });
}

/// out.flat[i] = x.flat[index[i]]; the backward pass scatter-adds, so
/// repeated indices accumulate.
template <typename T>
Var<T> gather(Var<T> x, std::vector<std::size_t> index, Shape shape) {
  require(shape_numel(shape) == index.size(), "gather: index count ", index.size(),
          " does not fill shape ", shape_str(shape));
  const auto& xv = x.value();
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < xv.size(), "gather: index out of range");
    out[i] = xv[index[i]];
  }
  const std::size_t ix = x.id;
  Tape<T>& tape = *x.tape;
  auto self = tape.size();
  return tape.record("gather", std::move(out), {x},
                     [ix, self, index = std::move(index)](Tape<T>& t) {
                       auto g = t.out_grad(self);
                       auto s = t.grad_sink(ix);
                       if (s.empty()) return;
                       for (std::size_t i = 0; i < index.size(); ++i) s[index[i]] += g[i];
                     });
}

/// Rows `rows` of a tensor whose leading extent indexes rows.
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  const Shape& xs = x.shape();
  require(!xs.empty() && !rows.empty(), "gather_rows: empty input");
  const std::size_t row = x.size() / xs[0];
  std::vector<std::size_t> index;
  index.reserve(rows.size() * row);
  for (std::size_t r : rows) {
    require(r < xs[0], "gather_rows: row ", r, " out of range ", xs[0]);
    for (std::size_t j = 0; j < row; ++j) index.push_back(r * row + j);
  }
  Shape out_shape = xs;
  out_shape[0] = rows.size();
  return gather(x, std::move(index), std::move(out_shape));
}

/// Columns [start, start+len) of an N x M matrix.
template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t len) {
  require(x.shape().size() == 2 && start + len <= x.shape()[1] && len > 0,
          "slice_cols: bad range on ", shape_str(x.shape()));
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  std::vector<std::size_t> index;
  index.reserve(n * len);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) index.push_back(i * m + start + j);
  return gather(x, std::move(index), Shape{n, len});
}

// ---------------------------------------------------------------------------
// Dense layers

/// a[N,A] * b[A,B]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
          "matmul: inner dimension mismatch ", shape_str(a.shape()), " * ",
          shape_str(b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor<T> out(Shape{n, m});
  gemm::nn(n, m, k, a.value().data().data(), b.value().data().data(), out.data().data());
  const std::size_t ia = a.id, ib = b.id;
  Tape<T>& tape = *a.tape;
  auto self = tape.size();
  return tape.record("matmul", std::move(out), {a, b}, [=](Tape<T>& t) {
    const T* g = t.out_grad(self).data();
    auto sa = t.grad_sink(ia);
    if (!sa.empty()) gemm::nt(n, k, m, g, t.value(ib).data().data(), sa.data());
    auto sb = t.grad_sink(ib);
    if (!sb.empty()) gemm::tn(k, m, n, t.value(ia).data().data(), g, sb.data());
  });
}

/// input[N,A] * weight[A,B] + bias[B]
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  require(input.shape().size() == 2 && weight.shape().size() == 2 &&
              input.shape()[1] == weight.shape()[0],
          "linear: inner dimension mismatch ", shape_str(input.shape()), " * ",
          shape_str(weight.shape()));
  require(bias.size() == weight.shape()[1], "linear: bias size ", bias.size(),
          " != ", weight.shape()[1]);
  const std::size_t n = input.shape()[0], k = input.shape()[1], m = weight.shape()[1];
  Tensor<T> out(Shape{n, m});
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = bv[j];
  gemm::nn(n, m, k, input.value().data().data(), weight.value().data().data(),
           out.data().data());
  const std::size_t ix = input.id, iw = weight.id, ib = bias.id;
  Tape<T>& tape = *input.tape;
  auto self = tape.size();
  return tape.record("linear", std::move(out), {input, weight, bias}, [=](Tape<T>& t) {
    const T* g = t.out_grad(self).data();
    auto sx = t.grad_sink(ix);
    if (!sx.empty()) gemm::nt(n, k, m, g, t.value(iw).data().data(), sx.data());
    auto sw = t.grad_sink(iw);
    if (!sw.empty()) gemm::tn(k, m, n, t.value(ix).data().data(), g, sw.data());
    auto sb = t.grad_sink(ib);
    for (std::size_t i = 0; i < n && !sb.empty(); ++i)
      for (std::size_t j = 0; j < m; ++j) sb[j] += g[i * m + j];
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (single image, C x H x W)

struct Conv2dGeometry {
  std::size_t c_in, h, w, c_out, kh, kw, stride, pad, out_h, out_w;
};

namespace detail {

template <typename T>
void im2col(const T* in, const Conv2dGeometry& g, T* col) {
  const std::size_t pix = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * pix;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const Conv2dGeometry& g, T* in) {
  const std::size_t pix = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * pix;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
              dst[static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// input[C_in,H,W] (*) weight[C_out,C_in,kh,kw] + bias[C_out] -> [C_out,H',W']
/// with H' = (H + 2 pad - kh) / stride + 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride,
              std::size_t pad) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  require(is.size() == 3, "conv2d: input must be C x H x W, got ", shape_str(is));
  require(ws.size() == 4, "conv2d: weight must be O x C x kh x kw, got ", shape_str(ws));
  require(ws[1] == is[0], "conv2d: weight expects ", ws[1], " input channels, got ", is[0]);
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(bias.size() == ws[0], "conv2d: bias size ", bias.size(), " != ", ws[0]);
  require(is[1] + 2 * pad >= ws[2] && is[2] + 2 * pad >= ws[3],
          "conv2d: kernel larger than padded input");
  Conv2dGeometry g{is[0], is[1], is[2], ws[0], ws[2], ws[3], stride, pad, 0, 0};
  g.out_h = (g.h + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.w + 2 * pad - g.kw) / stride + 1;
  const std::size_t rows = g.c_in * g.kh * g.kw;
  const std::size_t pix = g.out_h * g.out_w;
  std::vector<T> col(rows * pix);
  detail::im2col(input.value().data().data(), g, col.data());

  Tensor<T> out(Shape{g.c_out, g.out_h, g.out_w});
  const auto& bv = bias.value();
  for (std::size_t o = 0; o < g.c_out; ++o)
    std::fill(out.data().begin() + o * pix, out.data().begin() + (o + 1) * pix, bv[o]);
  gemm::nn(g.c_out, pix, rows, weight.value().data().data(), col.data(), out.data().data());

  const std::size_t ix = input.id, iw = weight.id, ib = bias.id;
  Tape<T>& tape = *input.tape;
  auto self = tape.size();
  return tape.record("conv2d", std::move(out), {input, weight, bias},
                     [=, col = std::move(col)](Tape<T>& t) {
                       const T* gout = t.out_grad(self).data();
                       auto sw = t.grad_sink(iw);
                       if (!sw.empty()) gemm::nt(g.c_out, rows, pix, gout, col.data(), sw.data());
                       auto sb = t.grad_sink(ib);
                       for (std::size_t o = 0; o < sb.size(); ++o) {
                         T acc = T(0);
                         for (std::size_t p = 0; p < pix; ++p) acc += gout[o * pix + p];
                         sb[o] += acc;
                       }
                       auto sx = t.grad_sink(ix);
                       if (sx.empty()) return;
                       std::vector<T> dcol(rows * pix, T(0));
                       gemm::tn(rows, pix, g.c_out, t.value(iw).data().data(), gout,
                                dcol.data());
                       detail::col2im(dcol.data(), g, sx.data());
                     });
}

/// Max pooling without padding; extents must tile exactly. Ties resolve to
/// the first cell of the window in row-major order.
template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window = 2, std::size_t stride = 2) {
  const Shape& is = input.shape();
  require(is.size() == 3, "maxpool2d: input must be C x H x W, got ", shape_str(is));
  require(window >= 1 && stride >= 1, "maxpool2d: window and stride must be >= 1");
  require(is[1] >= window && is[2] >= window && (is[1] - window) % stride == 0 &&
              (is[2] - window) % stride == 0,
          "maxpool2d: extents ", shape_str(is), " not divisible for window ", window,
          " stride ", stride);
  const std::size_t C = is[0], H = is[1], W = is[2];
  const std::size_t oh = (H - window) / stride + 1, ow = (W - window) / stride + 1;
  const auto& xv = input.value();
  Tensor<T> out(Shape{C, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (c * H + oy * stride) * W + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (c * H + oy * stride + dy) * W + ox * stride + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (c * oh + oy) * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  Tape<T>& tape = *input.tape;
  if (tape.tracks_kinks()) {
    std::uint64_t h = 0x5678;
    for (std::size_t a : argmax) h = detail::mix64(h, a);
    tape.mix_kink(h);
  }
  const std::size_t ix = input.id;
  auto self = tape.size();
  return tape.record("maxpool2d", std::move(out), {input},
                     [ix, self, argmax = std::move(argmax)](Tape<T>& t) {
                       auto g = t.out_grad(self);
                       auto s = t.grad_sink(ix);
                       for (std::size_t i = 0; i < argmax.size(); ++i) s[argmax[i]] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Recurrent cell

template <typename T>
struct LstmParams {
  Var<T> w_input;   // D_in x 4H
  Var<T> w_hidden;  // H x 4H
  Var<T> bias;      // 4H, gate order i, f, o, g
};

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

/// One LSTM step over a batch of rows: x[N,D_in], h/c[N,H].
///   i, f, o = sigmoid(.), g = tanh(.)
///   c = f * c_prev + i * g,   h = o * tanh(c)
template <typename T>
LstmState<T> lstm_step(Var<T> x, LstmState<T> prev, const LstmParams<T>& p) {
  require(p.w_input.shape().size() == 2 && p.w_hidden.shape().size() == 2,
          "lstm_step: weights must be matrices");
  const std::size_t H = p.w_hidden.shape()[0];
  require(p.w_hidden.shape()[1] == 4 * H && p.w_input.shape()[1] == 4 * H &&
              p.bias.size() == 4 * H,
          "lstm_step: parameter shapes inconsistent with hidden size ", H);
  require(x.shape().size() == 2 && x.shape()[1] == p.w_input.shape()[0],
          "lstm_step: input ", shape_str(x.shape()), " does not match w_input ",
          shape_str(p.w_input.shape()));
  require(prev.h.shape() == Shape{x.shape()[0], H} && prev.c.shape() == prev.h.shape(),
          "lstm_step: state shape mismatch");
  Var<T> z = add(linear(x, p.w_input, p.bias), matmul(prev.h, p.w_hidden));
  Var<T> i = sigmoid(slice_cols(z, 0, H));
  Var<T> f = sigmoid(slice_cols(z, H, H));
  Var<T> o = sigmoid(slice_cols(z, 2 * H, H));
  Var<T> g = tanh(slice_cols(z, 3 * H, H));
  Var<T> c = add(mul(f, prev.c), mul(i, g));
  Var<T> h = mul(o, tanh(c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// Losses

/// Sum over rows i with targets[i] >= 0 of weights[i] * -log softmax(row i)[t_i].
/// Rows with a negative target are skipped.
template <typename T>
Var<T> weighted_cross_entropy(Var<T> logits, std::vector<int> targets,
                              std::vector<T> weights) {
  require(logits.shape().size() == 2, "cross_entropy: logits must be N x K");
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  require(targets.size() == N && weights.size() == N, "cross_entropy: ", N,
          " rows but ", targets.size(), " targets / ", weights.size(), " weights");
  const auto& lv = logits.value();
  std::vector<T> probs(N * K, T(0));
  T loss = T(0);
  for (std::size_t i = 0; i < N; ++i) {
    if (targets[i] < 0) continue;
    require(static_cast<std::size_t>(targets[i]) < K, "cross_entropy: target ",
            targets[i], " out of range [0, ", K, ")");
    const T* row = &lv[i * K];
    const T mx = *std::max_element(row, row + K);
    T z = T(0);
    for (std::size_t k = 0; k < K; ++k) {
      probs[i * K + k] = std::exp(row[k] - mx);
      z += probs[i * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) probs[i * K + k] /= z;
    loss += weights[i] * (std::log(z) - (row[targets[i]] - mx));
  }
  const std::size_t il = logits.id;
  Tape<T>& tape = *logits.tape;
  auto self = tape.size();
  return tape.record(
      "cross_entropy", Tensor<T>::scalar(loss), {logits},
      [=, probs = std::move(probs), targets = std::move(targets),
       weights = std::move(weights)](Tape<T>& t) {
        const T g = t.out_grad(self)[0];
        auto s = t.grad_sink(il);
        for (std::size_t i = 0; i < N; ++i) {
          if (targets[i] < 0) continue;
          const T w = g * weights[i];
          for (std::size_t k = 0; k < K; ++k) s[i * K + k] += w * probs[i * K + k];
          s[i * K + static_cast<std::size_t>(targets[i])] -= w;
        }
      });
}

/// Mean over N rows of -log softmax(logits)[target].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> targets) {
  require(logits.shape().size() == 2, "softmax_cross_entropy: logits must be N x K");
  const std::size_t N = logits.shape()[0];
  for (int t : targets) require(t >= 0, "softmax_cross_entropy: negative target ", t);
  return weighted_cross_entropy(logits, std::vector<int>(targets.begin(), targets.end()),
                                std::vector<T>(N, T(1) / T(N)));
}

/// Mean binary logistic loss of logits against {0,1} labels, in the
/// overflow-free softplus form.
template <typename T>
Var<T> binary_logistic(Var<T> logits, std::span<const int> labels) {
  const std::size_t N = logits.size();
  require(labels.size() == N && N > 0, "binary_logistic: ", N, " logits vs ",
          labels.size(), " labels");
  const auto& zv = logits.value();
  T loss = T(0);
  std::vector<T> dz(N);
  for (std::size_t i = 0; i < N; ++i) {
    require(labels[i] == 0 || labels[i] == 1, "binary_logistic: label must be 0 or 1");
    const T z = labels[i] ? -zv[i] : zv[i];
    loss += std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
    const T sig = zv[i] >= T(0) ? T(1) / (T(1) + std::exp(-zv[i]))
                                : std::exp(zv[i]) / (T(1) + std::exp(zv[i]));
    dz[i] = (sig - T(labels[i])) / T(N);
  }
  loss /= T(N);
  const std::size_t il = logits.id;
  Tape<T>& tape = *logits.tape;
  auto self = tape.size();
  return tape.record("binary_logistic", Tensor<T>::scalar(loss), {logits},
                     [il, self, dz = std::move(dz)](Tape<T>& t) {
                       const T g = t.out_grad(self)[0];
                       auto s = t.grad_sink(il);
                       for (std::size_t i = 0; i < s.size(); ++i) s[i] += g * dz[i];
                     });
}

/// Huber-style penalty with unit transition: 0.5 d^2 for |d| < 1, |d| - 0.5
/// otherwise.
template <typename T>
T smooth_l1_value(T d) {
  const T a = std::abs(d);
  return a < T(1) ? T(0.5) * d * d : a - T(0.5);
}

template <typename T>
T smooth_l1_slope(T d) {
  return std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
}

/// Sum of smooth-L1 over all coordinates of `pred - target`, divided by
/// `pred.shape()[0]` (the number of regions).
template <typename T>
Var<T> smooth_l1_loss(Var<T> pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), "smooth_l1_loss: shape mismatch ",
          shape_str(pred.shape()), " vs ", shape_str(target.shape()));
  const auto& pv = pred.value();
  const T n = T(pred.shape()[0]);
  T loss = T(0);
  std::vector<T> slope(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - target[i];
    loss += smooth_l1_value(d);
    slope[i] = smooth_l1_slope(d) / n;
  }
  const std::size_t ip = pred.id;
  Tape<T>& tape = *pred.tape;
  auto self = tape.size();
  return tape.record("smooth_l1", Tensor<T>::scalar(loss / n), {pred},
                     [ip, self, slope = std::move(slope)](Tape<T>& t) {
                       const T g = t.out_grad(self)[0];
                       auto s = t.grad_sink(ip);
                       for (std::size_t i = 0; i < s.size(); ++i) s[i] += g * slope[i];
                     });
}

}  // namespace ops
}  // namespace densecap
