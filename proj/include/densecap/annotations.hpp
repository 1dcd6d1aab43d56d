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

// Line-delimited JSON records shared by annotations, ground truth and
// predictions. One image per line:
//
//   {"id": "000012", "image": "images/000012.ppm", "width": 64, "height": 64,
//    "split": "train",
//    "regions": [{"box": [x1, y1, x2, y2], "caption": "small red circle",
//                 "confidence": 0.93}]}
//
// "image", "width", "height" and "split" are optional on read. "confidence"
// is required in prediction files and ignored in ground truth.

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densecap/errors.hpp"
#include "densecap/geometry.hpp"

namespace densecap {

using Json = nlohmann::ordered_json;

struct CaptionedRegion {
  Box box;
  std::string caption;
  double confidence = 1.0;
};

struct ImageRecord {
  std::string id;
  std::string image;
  int width = 0, height = 0;
  std::string split;
  std::vector<CaptionedRegion> regions;
};

inline Json record_to_json(const ImageRecord& r, bool with_confidence) {
  Json j;
  j["id"] = r.id;
  if (!r.image.empty()) j["image"] = r.image;
  if (r.width > 0) j["width"] = r.width, j["height"] = r.height;
  if (!r.split.empty()) j["split"] = r.split;
  Json regions = Json::array();
  for (const auto& reg : r.regions) {
    const auto c = reg.box.corners();
    Json jr;
    jr["box"] = {c[0], c[1], c[2], c[3]};
    jr["caption"] = reg.caption;
    if (with_confidence) jr["confidence"] = reg.confidence;
    regions.push_back(std::move(jr));
  }
  j["regions"] = std::move(regions);
  return j;
}

inline ImageRecord record_from_json(const Json& j, bool need_confidence, const std::string& where) {
  auto fail = [&](const std::string& msg) { throw DataError(where + ": " + msg); };
  if (!j.is_object()) fail("record must be an object");
  ImageRecord r;
  if (!j.contains("id") || !j["id"].is_string()) fail("missing string field 'id'");
  r.id = j["id"].get<std::string>();
  if (j.contains("image")) {
    if (!j["image"].is_string()) fail("'image' must be a string");
    r.image = j["image"].get<std::string>();
  }
  if (j.contains("width") || j.contains("height")) {
    if (!j.contains("width") || !j.contains("height") || !j["width"].is_number_integer() ||
        !j["height"].is_number_integer())
      fail("'width' and 'height' must both be integers");
    r.width = j["width"].get<int>();
    r.height = j["height"].get<int>();
  }
  if (j.contains("split")) {
    if (!j["split"].is_string()) fail("'split' must be a string");
    r.split = j["split"].get<std::string>();
  }
  if (!j.contains("regions") || !j["regions"].is_array()) fail("missing array field 'regions'");
  for (std::size_t k = 0; k < j["regions"].size(); ++k) {
    const Json& jr = j["regions"][k];
    const std::string at = "region " + std::to_string(k) + ": ";
    if (!jr.is_object()) fail(at + "must be an object");
    if (!jr.contains("box") || !jr["box"].is_array() || jr["box"].size() != 4)
      fail(at + "'box' must be [x1, y1, x2, y2]");
    double c[4];
    for (int i = 0; i < 4; ++i) {
      if (!jr["box"][i].is_number()) fail(at + "box coordinates must be numbers");
      c[i] = jr["box"][i].get<double>();
      if (!std::isfinite(c[i])) fail(at + "box coordinates must be finite");
    }
    if (!(c[2] > c[0] && c[3] > c[1])) fail(at + "box must have x2 > x1 and y2 > y1");
    if (!jr.contains("caption") || !jr["caption"].is_string()) fail(at + "missing string 'caption'");
    CaptionedRegion reg{Box::from_corners(c[0], c[1], c[2], c[3]), jr["caption"].get<std::string>(), 1.0};
    if (jr.contains("confidence")) {
      if (!jr["confidence"].is_number()) fail(at + "'confidence' must be a number");
      reg.confidence = jr["confidence"].get<double>();
      if (!std::isfinite(reg.confidence)) fail(at + "'confidence' must be finite");
    } else if (need_confidence) {
      fail(at + "missing 'confidence'");
    }
    r.regions.push_back(std::move(reg));
  }
  return r;
}

inline void write_records(const std::string& path, const std::vector<ImageRecord>& records,
                          bool with_confidence) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& r : records) out << record_to_json(r, with_confidence).dump() << '\n';
  if (!out) throw DataError("failed writing " + path);
}

/// Parses a records file; errors carry "path:line".
inline std::vector<ImageRecord> read_records(const std::string& path, bool need_confidence) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::vector<ImageRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DataError(where + ": invalid JSON: " + e.what());
    }
    out.push_back(record_from_json(j, need_confidence, where));
  }
  return out;
}

}  // namespace densecap
