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

// Synthetic shapes-and-captions scenes and the on-disk dataset layout:
//
//   <root>/images/NNNNNN.ppm   binary PPM per image
//   <root>/annotations.jsonl   one ImageRecord per line (see annotations.hpp)
//   <root>/vocab.txt           one word per line (see vocabulary.hpp)
//   <root>/manifest.json       split id lists and statistics

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "densecap/annotations.hpp"
#include "densecap/image.hpp"
#include "densecap/ops.hpp"
#include "densecap/vocabulary.hpp"

namespace densecap {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class ColorName { kRed, kGreen, kBlue, kYellow };
enum class SizeClass { kSmall, kLarge };
enum class Relation { kLeftOf, kAbove };

inline const char* name(ShapeKind s) {
  static const char* n[] = {"circle", "square", "triangle"};
  return n[int(s)];
}
inline const char* name(ColorName c) {
  static const char* n[] = {"red", "green", "blue", "yellow"};
  return n[int(c)];
}
inline const char* name(SizeClass s) { return s == SizeClass::kSmall ? "small" : "large"; }

inline Rgb palette(ColorName c) {
  static const Rgb p[] = {{220, 40, 40}, {40, 190, 60}, {50, 80, 230}, {230, 210, 40}};
  return p[int(c)];
}

/// An object occupies the square [x0, x0 + extent) x [y0, y0 + extent).
struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  ColorName color = ColorName::kRed;
  SizeClass size = SizeClass::kSmall;
  int x0 = 0, y0 = 0, extent = 1;
};

struct SceneSpec {
  int width = 64, height = 64;
  Rgb background{60, 60, 60};
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

struct SynthConfig {
  int width = 64, height = 64;
  int min_objects = 2, max_objects = 4;
  int small_min = 12, small_max = 16;
  int large_min = 24, large_max = 30;
  int gap = 2;
  double relation_prob = 0.25;
  bool size_words = true;
  int noise = 6;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("scene config: " + m); };
    if (width < 8 || height < 8) bad("image must be at least 8x8");
    if (min_objects < 1 || max_objects < min_objects || max_objects > 8)
      bad("need 1 <= min_objects <= max_objects <= 8");
    if (small_min < 3 || small_max < small_min || large_min < small_max || large_max < large_min)
      bad("need 3 <= small_min <= small_max <= large_min <= large_max");
    if (large_max > std::min(width, height)) bad("large objects do not fit the image");
    if (gap < 0 || noise < 0 || noise > 60) bad("gap and noise must be non-negative (noise <= 60)");
    if (relation_prob < 0 || relation_prob > 1) bad("relation_prob must be in [0, 1]");
  }
};

/// Pixel (px, py) belongs to the object if its center lies inside the shape.
inline bool covers(const SceneObject& o, int px, int py) {
  const double e = o.extent;
  const double x = px + 0.5 - o.x0, y = py + 0.5 - o.y0;
  if (x < 0 || y < 0 || x > e || y > e) return false;
  switch (o.shape) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kCircle: {
      const double dx = x - e / 2, dy = y - e / 2;
      return dx * dx + dy * dy <= e * e / 4;
    }
    case ShapeKind::kTriangle:
      // Apex at top center, base along the bottom edge.
      return std::abs(x - e / 2) <= y / 2;
  }
  return false;
}

inline Image render_scene(const SceneSpec& spec, int noise = 0) {
  Image img(spec.width, spec.height, spec.background);
  for (const auto& o : spec.objects)
    for (int y = o.y0; y < o.y0 + o.extent; ++y)
      for (int x = o.x0; x < o.x0 + o.extent; ++x)
        if (covers(o, x, y)) img.set(x, y, palette(o.color));
  if (noise > 0) {
    std::mt19937_64 rng(spec.seed ^ 0x6e6f697365ULL);
    for (auto& v : img.pixels)
      v = std::uint8_t(std::clamp(int(v) + int(uniform_index(rng, 2 * noise + 1)) - noise, 0, 255));
  }
  return img;
}

/// Tight box of the rendered pixels of object `i` by raster scan.
inline Box tight_box(const SceneSpec& spec, std::size_t i) {
  const SceneObject& o = spec.objects.at(i);
  int x1 = spec.width, y1 = spec.height, x2 = -1, y2 = -1;
  for (int y = o.y0; y < o.y0 + o.extent; ++y)
    for (int x = o.x0; x < o.x0 + o.extent; ++x)
      if (covers(o, x, y)) x1 = std::min(x1, x), x2 = std::max(x2, x), y1 = std::min(y1, y), y2 = std::max(y2, y);
  require(x2 >= 0, "tight_box: object renders no pixels");
  return Box::from_corners(x1, y1, x2 + 1, y2 + 1);
}

inline bool relation_holds(const Box& a, const Box& b, Relation r) {
  const auto ca = a.corners(), cb = b.corners();
  return r == Relation::kLeftOf ? ca[2] <= cb[0] : ca[3] <= cb[1];
}

/// Samples non-overlapping objects. Throws ConfigError if the layout cannot
/// be satisfied after many attempts.
inline SceneSpec sample_scene(std::mt19937_64& rng, const SynthConfig& cfg) {
  cfg.validate();
  for (int attempt = 0; attempt < 200; ++attempt) {
    SceneSpec spec;
    spec.width = cfg.width;
    spec.height = cfg.height;
    spec.seed = rng();
    const int base = 40 + int(uniform_index(rng, 41));
    spec.background = {std::uint8_t(base), std::uint8_t(base), std::uint8_t(base + 10)};
    const int n = cfg.min_objects + int(uniform_index(rng, std::size_t(cfg.max_objects - cfg.min_objects + 1)));
    for (int k = 0; k < n; ++k) {
      SceneObject o;
      o.shape = ShapeKind(uniform_index(rng, 3));
      o.color = ColorName(uniform_index(rng, 4));
      o.size = uniform_index(rng, 2) ? SizeClass::kLarge : SizeClass::kSmall;
      const int lo = o.size == SizeClass::kSmall ? cfg.small_min : cfg.large_min;
      const int hi = o.size == SizeClass::kSmall ? cfg.small_max : cfg.large_max;
      o.extent = lo + int(uniform_index(rng, std::size_t(hi - lo + 1)));
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        o.x0 = int(uniform_index(rng, std::size_t(cfg.width - o.extent + 1)));
        o.y0 = int(uniform_index(rng, std::size_t(cfg.height - o.extent + 1)));
        placed = std::none_of(spec.objects.begin(), spec.objects.end(), [&](const SceneObject& p) {
          return o.x0 < p.x0 + p.extent + cfg.gap && p.x0 < o.x0 + o.extent + cfg.gap &&
                 o.y0 < p.y0 + p.extent + cfg.gap && p.y0 < o.y0 + o.extent + cfg.gap;
        });
      }
      if (placed) spec.objects.push_back(o);
    }
    if (int(spec.objects.size()) >= cfg.min_objects) return spec;
  }
  throw ConfigError("scene config: objects do not fit the image; reduce sizes or counts");
}

/// "[size] color shape" with an optional "left of / above color shape".
inline std::string caption_for(const SceneSpec& spec, std::size_t i, std::mt19937_64& rng,
                               const SynthConfig& cfg) {
  const SceneObject& o = spec.objects[i];
  std::string cap = cfg.size_words ? std::string(name(o.size)) + " " : std::string();
  cap += std::string(name(o.color)) + " " + name(o.shape);
  if (uniform01(rng) < cfg.relation_prob) {
    const Relation rel = uniform_index(rng, 2) ? Relation::kAbove : Relation::kLeftOf;
    const Box bi = tight_box(spec, i);
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < spec.objects.size(); ++j)
      if (j != i && relation_holds(bi, tight_box(spec, j), rel)) cand.push_back(j);
    if (!cand.empty()) {
      const SceneObject& r = spec.objects[cand[uniform_index(rng, cand.size())]];
      cap += rel == Relation::kLeftOf ? " left of " : " above ";
      cap += std::string(name(r.color)) + " " + name(r.shape);
    }
  }
  return cap;
}

struct ParsedCaption {
  std::optional<SizeClass> size;
  ColorName color{};
  ShapeKind shape{};
  std::optional<Relation> relation;
  ColorName other_color{};
  ShapeKind other_shape{};
};

/// Inverse of the caption grammar; nullopt for text outside it.
inline std::optional<ParsedCaption> parse_caption(const std::string& text) {
  const auto tok = tokenize(text);
  std::size_t p = 0;
  auto color = [&](ColorName& out) {
    for (int c = 0; c < 4; ++c)
      if (p < tok.size() && tok[p] == name(ColorName(c))) return out = ColorName(c), ++p, true;
    return false;
  };
  auto shape = [&](ShapeKind& out) {
    for (int s = 0; s < 3; ++s)
      if (p < tok.size() && tok[p] == name(ShapeKind(s))) return out = ShapeKind(s), ++p, true;
    return false;
  };
  ParsedCaption pc;
  if (p < tok.size() && (tok[p] == "small" || tok[p] == "large"))
    pc.size = tok[p] == "small" ? SizeClass::kSmall : SizeClass::kLarge, ++p;
  if (!color(pc.color) || !shape(pc.shape)) return std::nullopt;
  if (p == tok.size()) return pc;
  if (p + 1 < tok.size() && tok[p] == "left" && tok[p + 1] == "of") {
    pc.relation = Relation::kLeftOf, p += 2;
  } else if (tok[p] == "above") {
    pc.relation = Relation::kAbove, ++p;
  } else {
    return std::nullopt;
  }
  if (!color(pc.other_color) || !shape(pc.other_shape) || p != tok.size()) return std::nullopt;
  return pc;
}

/// True if `caption` parses and correctly describes object `i`.
inline bool caption_is_true(const SceneSpec& spec, std::size_t i, const std::string& caption) {
  const auto pc = parse_caption(caption);
  if (!pc) return false;
  const SceneObject& o = spec.objects.at(i);
  if ((pc->size && *pc->size != o.size) || pc->color != o.color || pc->shape != o.shape) return false;
  if (!pc->relation) return true;
  const Box bi = tight_box(spec, i);
  for (std::size_t j = 0; j < spec.objects.size(); ++j) {
    const SceneObject& r = spec.objects[j];
    if (j != i && r.color == pc->other_color && r.shape == pc->other_shape &&
        relation_holds(bi, tight_box(spec, j), *pc->relation))
      return true;
  }
  return false;
}

struct Scene {
  SceneSpec spec;
  Image image;
  std::vector<CaptionedRegion> regions;  // parallel to spec.objects
};

inline Scene generate_scene(std::mt19937_64& rng, const SynthConfig& cfg) {
  Scene s;
  s.spec = sample_scene(rng, cfg);
  s.image = render_scene(s.spec, cfg.noise);
  for (std::size_t i = 0; i < s.spec.objects.size(); ++i)
    s.regions.push_back({tight_box(s.spec, i), caption_for(s.spec, i, rng, cfg), 1.0});
  return s;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct FilterStats {
  std::size_t captions_dropped = 0;
  std::size_t images_dropped = 0;
  std::size_t images_kept = 0;
  std::size_t regions_kept = 0;
};

/// Drops captions longer than max_tokens, then images whose region count
/// falls outside [min_regions, max_regions].
inline FilterStats filter_annotations(std::vector<ImageRecord>& records, std::size_t max_tokens,
                                      std::size_t min_regions, std::size_t max_regions) {
  FilterStats st;
  std::vector<ImageRecord> kept;
  for (auto& r : records) {
    const std::size_t before = r.regions.size();
    std::erase_if(r.regions, [&](const CaptionedRegion& reg) {
      const auto n = tokenize(reg.caption).size();
      return n == 0 || n > max_tokens;
    });
    st.captions_dropped += before - r.regions.size();
    if (r.regions.size() < min_regions || r.regions.size() > max_regions) {
      ++st.images_dropped;
      continue;
    }
    st.regions_kept += r.regions.size();
    kept.push_back(std::move(r));
  }
  st.images_kept = kept.size();
  if (kept.empty()) throw DataError("filter_annotations: every image was filtered out");
  records = std::move(kept);
  return st;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
  SynthConfig scene;
  std::size_t num_train = 500, num_val = 50, num_test = 100;
  std::size_t min_word_count = 15;
  std::size_t max_caption_tokens = 10;
  std::size_t min_regions = 2, max_regions = 8;
};

struct Dataset {
  std::string root;
  std::vector<ImageRecord> records;
  Vocabulary vocab;
  Json manifest;

  std::vector<const ImageRecord*> split(const std::string& name) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
  Image load_image(const ImageRecord& r) const {
    return read_ppm((std::filesystem::path(root) / r.image).string());
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string image_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

/// Renders, filters and writes a dataset under `root`. Image i uses seed
/// splitmix64(seed + i), so each scene is independent of the others.
inline Dataset generate_dataset(const std::string& root, const DatasetConfig& cfg, std::uint64_t seed) {
  namespace fs = std::filesystem;
  cfg.scene.validate();
  std::error_code ec;
  fs::create_directories(fs::path(root) / "images", ec);
  if (ec) throw DataError("cannot create dataset directory " + root + ": " + ec.message());

  const std::size_t total = cfg.num_train + cfg.num_val + cfg.num_test;
  if (total == 0) throw ConfigError("dataset config: no images requested");
  Dataset ds;
  ds.root = root;
  for (std::size_t i = 0; i < total; ++i) {
    std::mt19937_64 rng(splitmix64(seed + i));
    Scene s = generate_scene(rng, cfg.scene);
    ImageRecord r;
    r.id = image_id(i);
    r.image = "images/" + r.id + ".ppm";
    r.width = s.image.width;
    r.height = s.image.height;
    r.split = i < cfg.num_train ? "train" : i < cfg.num_train + cfg.num_val ? "val" : "test";
    r.regions = std::move(s.regions);
    write_ppm((fs::path(root) / r.image).string(), s.image);
    ds.records.push_back(std::move(r));
  }
  const FilterStats fst = filter_annotations(ds.records, cfg.max_caption_tokens, cfg.min_regions,
                                             cfg.max_regions);

  std::vector<std::string> train_caps;
  for (const auto& r : ds.records)
    if (r.split == "train")
      for (const auto& reg : r.regions) train_caps.push_back(reg.caption);
  if (train_caps.empty()) throw DataError("dataset has no training captions");
  ds.vocab = build_vocabulary(train_caps, cfg.min_word_count);

  std::map<std::string, std::size_t> counts;
  std::size_t tokens = 0, unk = 0;
  for (const auto& c : train_caps)
    for (const auto& w : tokenize(c)) ++counts[w], ++tokens, unk += !ds.vocab.contains(w);

  Json splits = Json::object();
  for (const char* name : {"train", "val", "test"}) {
    Json ids = Json::array();
    for (const auto& r : ds.records)
      if (r.split == name) ids.push_back(r.id);
    splits[name] = std::move(ids);
  }
  std::size_t regions = 0;
  for (const auto& r : ds.records) regions += r.regions.size();
  ds.manifest["format"] = "densecap-synth";
  ds.manifest["version"] = 1;
  ds.manifest["seed"] = seed;
  ds.manifest["splits"] = std::move(splits);
  ds.manifest["stats"] = {{"images", ds.records.size()},
                          {"regions", regions},
                          {"captions_dropped", fst.captions_dropped},
                          {"images_dropped", fst.images_dropped},
                          {"vocab_words", ds.vocab.num_words()},
                          {"train_tokens", tokens},
                          {"train_unk_tokens", unk},
                          {"token_counts", counts}};

  write_records((fs::path(root) / "annotations.jsonl").string(), ds.records, false);
  ds.vocab.save((fs::path(root) / "vocab.txt").string());
  std::ofstream mf(fs::path(root) / "manifest.json");
  if (!mf) throw DataError("cannot write manifest in " + root);
  mf << ds.manifest.dump(2) << '\n';
  return ds;
}

inline Dataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.root = root;
  ds.records = read_records((fs::path(root) / "annotations.jsonl").string(), false);
  ds.vocab = Vocabulary::load((fs::path(root) / "vocab.txt").string());
  std::ifstream mf(fs::path(root) / "manifest.json");
  if (!mf) throw DataError("missing manifest.json in " + root);
  try {
    ds.manifest = Json::parse(mf);
  } catch (const Json::parse_error& e) {
    throw DataError(root + "/manifest.json: " + e.what());
  }
  for (const auto& r : ds.records) {
    if (r.split.empty()) throw DataError("record " + r.id + " has no split");
    if (r.image.empty()) throw DataError("record " + r.id + " has no image path");
  }
  return ds;
}

}  // namespace densecap
