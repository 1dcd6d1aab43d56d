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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "densecap/errors.hpp"
#include "densecap/tensor.hpp"

namespace densecap {

using Rgb = std::array<std::uint8_t, 3>;

/// 8-bit RGB raster, row-major, interleaved.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, Rgb fill = {0, 0, 0}) : width(w), height(h), pixels(std::size_t(w) * h * 3) {
    require(w > 0 && h > 0, "image extents must be positive");
    for (std::size_t i = 0; i < pixels.size(); i += 3)
      std::copy(fill.begin(), fill.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i));
  }

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  void set(int x, int y, Rgb c) {
    if (!contains(x, y)) return;
    std::uint8_t* p = &pixels[(std::size_t(y) * width + x) * 3];
    p[0] = c[0], p[1] = c[1], p[2] = c[2];
  }
  Rgb get(int x, int y) const {
    const std::uint8_t* p = &pixels[(std::size_t(y) * width + x) * 3];
    return {p[0], p[1], p[2]};
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("failed writing " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path);
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    return tok;
  };
  if (next_token() != "P6") throw DataError(path + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw DataError(path + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path + ": unsupported PPM header");
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw DataError(path + ": truncated pixel data");
  return img;
}

/// 3 x H x W tensor with values (v - 128) / 64.
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t(Shape{3, std::size_t(img.height), std::size_t(img.width)});
  const std::size_t plane = std::size_t(img.width) * img.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = (T(img.pixels[p * 3 + c]) - T(128)) / T(64);
  return t;
}

/// Nearest-neighbor upscale by an integer factor.
inline Image upscale(const Image& img, int factor) {
  require(factor >= 1, "upscale factor must be >= 1");
  Image out(img.width * factor, img.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.set(x, y, img.get(x / factor, y / factor));
  return out;
}

inline Image crop(const Image& img, int x0, int y0, int x1, int y1) {
  x0 = std::clamp(x0, 0, img.width - 1);
  y0 = std::clamp(y0, 0, img.height - 1);
  x1 = std::clamp(x1, x0 + 1, img.width);
  y1 = std::clamp(y1, y0 + 1, img.height);
  Image out(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) out.set(x - x0, y - y0, img.get(x, y));
  return out;
}

/// Copies `src` into `dst` with its top-left corner at (x, y).
inline void blit(Image& dst, const Image& src, int x, int y) {
  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < src.width; ++c) dst.set(x + c, y + r, src.get(c, r));
}

// ---------------------------------------------------------------------------
// Drawing

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, x0 += sx;
    if (e2 <= dx) err += dx, y0 += sy;
  }
}

inline void draw_rect(Image& img, int x0, int y0, int x1, int y1, Rgb c, int thickness = 1) {
  for (int t = 0; t < thickness; ++t) {
    draw_line(img, x0 + t, y0 + t, x1 - t, y0 + t, c);
    draw_line(img, x0 + t, y1 - t, x1 - t, y1 - t, c);
    draw_line(img, x0 + t, y0 + t, x0 + t, y1 - t, c);
    draw_line(img, x1 - t, y0 + t, x1 - t, y1 - t, c);
  }
}

inline void fill_rect(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) img.set(x, y, c);
}

namespace detail {

// 5x7 glyphs, one byte per row, low 5 bits used (bit 4 = leftmost column).
struct Glyph {
  char ch;
  std::array<std::uint8_t, 7> rows;
};

inline const std::vector<Glyph>& font() {
  static const std::vector<Glyph> glyphs = {
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}}, {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}}, {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
      {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}}, {'@', {0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E}},
  };
  return glyphs;
}

}  // namespace detail

constexpr int kGlyphAdvance = 6;
constexpr int kGlyphHeight = 7;

/// Draws `text` with its top-left corner at (x, y); letters are rendered in
/// upper case, unknown characters as blanks.
inline void draw_text(Image& img, int x, int y, const std::string& text, Rgb c, int scale = 1) {
  for (char raw : text) {
    const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
    for (const auto& g : detail::font()) {
      if (g.ch != ch) continue;
      for (int r = 0; r < kGlyphHeight; ++r)
        for (int col = 0; col < 5; ++col)
          if (g.rows[r] & (0x10 >> col))
            fill_rect(img, x + col * scale, y + r * scale, x + (col + 1) * scale,
                      y + (r + 1) * scale, c);
      break;
    }
    x += kGlyphAdvance * scale;
  }
}

/// A line chart of one or more series sharing the x axis (index) and a
/// common y range. Returns the rendered chart.
inline Image render_line_chart(const std::vector<std::vector<double>>& series,
                               const std::vector<Rgb>& colors,
                               const std::vector<std::string>& labels, int width = 640,
                               int height = 400) {
  Image img(width, height, {255, 255, 255});
  const int left = 60, right = width - 20, top = 20, bottom = height - 40;
  double lo = 0.0, hi = 1e-12;
  std::size_t n = 1;
  for (const auto& s : series)
    for (double v : s)
      if (std::isfinite(v)) hi = std::max(hi, v), lo = std::min(lo, v);
  for (const auto& s : series) n = std::max(n, s.size());
  draw_line(img, left, top, left, bottom, {0, 0, 0});
  draw_line(img, left, bottom, right, bottom, {0, 0, 0});
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return std::string(buf);
  };
  draw_text(img, 4, top, fmt(hi), {0, 0, 0});
  draw_text(img, 4, bottom - kGlyphHeight, fmt(lo), {0, 0, 0});
  draw_text(img, left, bottom + 8, "0", {0, 0, 0});
  const std::string nlab = fmt(double(n - 1));
  draw_text(img, right - kGlyphAdvance * int(nlab.size()), bottom + 8, nlab, {0, 0, 0});
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const Rgb c = colors[k % colors.size()];
    int px = -1, py = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!std::isfinite(s[i])) continue;
      const int x = left + int(std::lround(double(i) / double(std::max<std::size_t>(1, n - 1)) * (right - left)));
      const int y = bottom - int(std::lround((s[i] - lo) / (hi - lo) * (bottom - top)));
      if (px >= 0) draw_line(img, px, py, x, y, c);
      px = x, py = y;
    }
    if (k < labels.size()) {
      fill_rect(img, right - 150, top + 4 + 12 * int(k), right - 140, top + 11 + 12 * int(k), c);
      draw_text(img, right - 134, top + 4 + 12 * int(k), labels[k], {0, 0, 0});
    }
  }
  return img;
}

}  // namespace densecap
