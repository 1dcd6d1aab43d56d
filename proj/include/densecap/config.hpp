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

// Run configuration. A JSON object with the sections below; every key is
// optional and defaults to the value shown by `run_config_to_json(RunConfig{})`.
// Unknown keys are rejected.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "densecap/annotations.hpp"
#include "densecap/data_synth.hpp"
#include "densecap/model.hpp"
#include "densecap/training.hpp"

namespace densecap {

struct DataSection {
  std::string root = "data";
  DatasetConfig dataset;
};

struct TrainSection {
  std::string data = "data";
  std::string out = "runs/train";
  std::string resume;  // checkpoint to continue from
  TrainConfig train;
};

struct DescribeSection {
  std::string checkpoint;
  std::string image;  // single PPM, or
  std::string data;   // dataset root + split
  std::string split = "test";
  std::string out = "runs/describe";
  std::size_t render_limit = 8;  // annotated images written for a split
  std::size_t render_scale = 4;
  InferenceOptions inference;
};

struct EvaluateSection {
  std::string predictions;
  std::string ground_truth;
  std::string split;  // restricts ground truth to one split when set
  std::string out = "runs/evaluate";
  double merge_iou = 0.7;
};

struct RetrieveSection {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out = "runs/retrieve";
  std::size_t pool = 100;
  std::size_t queries = 20;
  std::size_t captions_per_query = 4;
  std::size_t proposals = 100;
  double rpn_nms = 0.7;
};

struct DetectSection {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string query;
  std::string out = "runs/detect";
  std::size_t top_n = 10;
  std::size_t proposals = 100;
  double rpn_nms = 0.7;
  std::size_t crop_scale = 4;
};

struct RunConfig {
  std::uint64_t seed = 1234;
  std::string precision = "float";  // "float" or "double"
  DataSection data;
  ModelConfig model;  // vocab_classes comes from the dataset
  TrainSection train;
  DescribeSection describe;
  EvaluateSection evaluate;
  RetrieveSection retrieve;
  DetectSection detect;

  void validate() const {
    if (precision != "float" && precision != "double")
      throw ConfigError("precision must be \"float\" or \"double\", got \"" + precision + "\"");
    data.dataset.scene.validate();
    ModelConfig m = model;
    m.vocab_classes = std::max<std::size_t>(m.vocab_classes, 3);
    m.validate();
    if (data.dataset.num_train == 0) throw ConfigError("data.num_train must be positive");
    train.train.validate();
    if (!(evaluate.merge_iou > 0 && evaluate.merge_iou <= 1))
      throw ConfigError("evaluate.merge_iou must be in (0, 1]");
    if (retrieve.pool == 0 || retrieve.queries == 0 || retrieve.captions_per_query == 0 ||
        retrieve.proposals == 0)
      throw ConfigError("retrieve sizes must be positive");
    if (detect.proposals == 0) throw ConfigError("detect.proposals must be positive");
    if (describe.render_scale == 0 || detect.crop_scale == 0)
      throw ConfigError("render scales must be positive");
  }
};

namespace detail {

inline const Json& empty_object() {
  static const Json e = Json::object();
  return e;
}

// Reads fields of one JSON object and rejects keys that were never asked for.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(j_.at(key), out, where() + key);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : empty_object(), where() + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where() + k + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + "."; }

  static void read(const Json& v, bool& out, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError(key + " must be a boolean");
    out = v.get<bool>();
  }
  static void read(const Json& v, std::string& out, const std::string& key) {
    if (!v.is_string()) throw ConfigError(key + " must be a string");
    out = v.get<std::string>();
  }
  static void read(const Json& v, double& out, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key + " must be a number");
    out = v.get<double>();
  }
  static void read(const Json& v, int& out, const std::string& key) {
    if (!v.is_number_integer()) throw ConfigError(key + " must be an integer");
    out = v.get<int>();
  }
  static void read(const Json& v, std::size_t& out, const std::string& key) {
    if (!v.is_number_unsigned()) throw ConfigError(key + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }
  template <typename E>
  static void read(const Json& v, std::vector<E>& out, const std::string& key) {
    if (!v.is_array()) throw ConfigError(key + " must be an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      E e{};
      read(v[i], e, key + "[" + std::to_string(i) + "]");
      out.push_back(e);
    }
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// One field list per section serves both directions.
struct ToJson {
  Json& j;
  template <typename V>
  void get(const char* key, const V& v) { j[key] = v; }
};

template <typename S, typename F>
void scene_fields(S& s, F& c) {
  s.get("width", c.width);
  s.get("height", c.height);
  s.get("min_objects", c.min_objects);
  s.get("max_objects", c.max_objects);
  s.get("small_min", c.small_min);
  s.get("small_max", c.small_max);
  s.get("large_min", c.large_min);
  s.get("large_max", c.large_max);
  s.get("gap", c.gap);
  s.get("relation_prob", c.relation_prob);
  s.get("size_words", c.size_words);
  s.get("noise", c.noise);
}

template <typename S, typename D>
void data_fields(S& s, D& d) {
  s.get("root", d.root);
  s.get("num_train", d.dataset.num_train);
  s.get("num_val", d.dataset.num_val);
  s.get("num_test", d.dataset.num_test);
  s.get("min_word_count", d.dataset.min_word_count);
  s.get("max_caption_tokens", d.dataset.max_caption_tokens);
  s.get("min_regions", d.dataset.min_regions);
  s.get("max_regions", d.dataset.max_regions);
}

template <typename S, typename M>
void model_fields(S& s, M& m) {
  s.get("conv_channels", m.conv_channels);
  s.get("pool_after", m.pool_after);
  s.get("anchor_scales", m.anchor_scales);
  s.get("anchor_ratios", m.anchor_ratios);
  s.get("rpn_hidden", m.rpn_hidden);
  s.get("roi_width", m.roi_width);
  s.get("roi_height", m.roi_height);
  s.get("fc_hidden", m.fc_hidden);
  s.get("code_dim", m.code_dim);
  s.get("lm_hidden", m.lm_hidden);
  s.get("dropout", m.dropout);
  s.get("init_std", m.init_std);
  s.get("caption_init_std", m.caption_init_std);
}

template <typename S, typename W>
void weight_fields(S& s, W& w) {
  s.get("rpn_score", w.rpn_score);
  s.get("rpn_box", w.rpn_box);
  s.get("rec_score", w.rec_score);
  s.get("rec_box", w.rec_box);
  s.get("caption", w.caption);
}

template <typename S, typename P>
void sampling_fields(S& s, P& p) {
  s.get("batch_size", p.batch_size);
  s.get("pos_iou", p.pos_iou);
  s.get("neg_iou", p.neg_iou);
}

template <typename S, typename T>
void train_fields(S& s, T& t) {
  s.get("data", t.data);
  s.get("out", t.out);
  s.get("resume", t.resume);
  auto& c = t.train;
  s.get("iterations", c.iterations);
  s.get("sgd_lr", c.sgd_lr);
  s.get("momentum", c.momentum);
  s.get("adam_lr", c.adam_lr);
  s.get("beta1", c.beta1);
  s.get("beta2", c.beta2);
  s.get("eps", c.eps);
  s.get("use_gt_boxes", c.use_gt_boxes);
  s.get("finetune_after", c.finetune_after);
  s.get("freeze", c.freeze);
  s.get("clip_norm", c.clip_norm);
  s.get("checked", c.checked);
  s.get("checkpoint_every", c.checkpoint_every);
  s.get("log_every", c.log_every);
}

template <typename S, typename I>
void inference_fields(S& s, I& o) {
  s.get("rpn_keep", o.rpn_keep);
  s.get("rpn_nms", o.rpn_nms);
  s.get("final_nms", o.final_nms);
  s.get("max_regions", o.max_regions);
  s.get("max_caption_len", o.max_caption_len);
}

template <typename S, typename D>
void describe_fields(S& s, D& d) {
  s.get("checkpoint", d.checkpoint);
  s.get("image", d.image);
  s.get("data", d.data);
  s.get("split", d.split);
  s.get("out", d.out);
  s.get("render_limit", d.render_limit);
  s.get("render_scale", d.render_scale);
  inference_fields(s, d.inference);
}

template <typename S, typename E>
void evaluate_fields(S& s, E& e) {
  s.get("predictions", e.predictions);
  s.get("ground_truth", e.ground_truth);
  s.get("split", e.split);
  s.get("out", e.out);
  s.get("merge_iou", e.merge_iou);
}

template <typename S, typename R>
void retrieve_fields(S& s, R& r) {
  s.get("checkpoint", r.checkpoint);
  s.get("data", r.data);
  s.get("split", r.split);
  s.get("out", r.out);
  s.get("pool", r.pool);
  s.get("queries", r.queries);
  s.get("captions_per_query", r.captions_per_query);
  s.get("proposals", r.proposals);
  s.get("rpn_nms", r.rpn_nms);
}

template <typename S, typename D>
void detect_fields(S& s, D& d) {
  s.get("checkpoint", d.checkpoint);
  s.get("data", d.data);
  s.get("split", d.split);
  s.get("query", d.query);
  s.get("out", d.out);
  s.get("top_n", d.top_n);
  s.get("proposals", d.proposals);
  s.get("rpn_nms", d.rpn_nms);
  s.get("crop_scale", d.crop_scale);
}

}  // namespace detail

inline Json model_config_to_json(const ModelConfig& m) {
  Json j = Json::object();
  detail::ToJson w{j};
  detail::model_fields(w, m);
  j["vocab_classes"] = m.vocab_classes;
  return j;
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig m;
  detail::Section s(j, "model");
  detail::model_fields(s, m);
  s.get("vocab_classes", m.vocab_classes);
  s.finish();
  return m;
}

inline Json run_config_to_json(const RunConfig& c) {
  using detail::ToJson;
  Json j = Json::object();
  j["seed"] = c.seed;
  j["precision"] = c.precision;

  Json data = Json::object(), scene = Json::object();
  ToJson d{data}, sc{scene};
  detail::data_fields(d, c.data);
  detail::scene_fields(sc, c.data.dataset.scene);
  data["scene"] = scene;
  j["data"] = data;

  Json model = Json::object();
  ToJson m{model};
  detail::model_fields(m, c.model);
  j["model"] = model;

  Json train = Json::object(), weights = Json::object(), sampling = Json::object();
  ToJson t{train}, w{weights}, sa{sampling};
  detail::train_fields(t, c.train);
  detail::weight_fields(w, c.train.train.weights);
  detail::sampling_fields(sa, c.train.train.sampling);
  train["loss_weights"] = weights;
  train["sampling"] = sampling;
  j["train"] = train;

  Json describe = Json::object(), evaluate = Json::object(), retrieve = Json::object(),
       detect = Json::object();
  ToJson de{describe}, ev{evaluate}, re{retrieve}, dt{detect};
  detail::describe_fields(de, c.describe);
  detail::evaluate_fields(ev, c.evaluate);
  detail::retrieve_fields(re, c.retrieve);
  detail::detect_fields(dt, c.detect);
  j["describe"] = describe;
  j["evaluate"] = evaluate;
  j["retrieve"] = retrieve;
  j["detect"] = detect;
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::Section root(j, "");
  root.get("seed", c.seed);
  root.get("precision", c.precision);
  {
    auto s = root.sub("data");
    detail::data_fields(s, c.data);
    auto sc = s.sub("scene");
    detail::scene_fields(sc, c.data.dataset.scene);
    sc.finish();
    s.finish();
  }
  {
    auto s = root.sub("model");
    detail::model_fields(s, c.model);
    s.finish();
  }
  {
    auto s = root.sub("train");
    detail::train_fields(s, c.train);
    auto w = s.sub("loss_weights");
    detail::weight_fields(w, c.train.train.weights);
    w.finish();
    auto sa = s.sub("sampling");
    detail::sampling_fields(sa, c.train.train.sampling);
    sa.finish();
    s.finish();
  }
  {
    auto s = root.sub("describe");
    detail::describe_fields(s, c.describe);
    s.finish();
  }
  {
    auto s = root.sub("evaluate");
    detail::evaluate_fields(s, c.evaluate);
    s.finish();
  }
  {
    auto s = root.sub("retrieve");
    detail::retrieve_fields(s, c.retrieve);
    s.finish();
  }
  {
    auto s = root.sub("detect");
    detail::detect_fields(s, c.detect);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline void save_run_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << run_config_to_json(c).dump(2) << "\n";
}

}  // namespace densecap
