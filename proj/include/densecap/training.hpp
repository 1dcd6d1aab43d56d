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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "densecap/data_synth.hpp"
#include "densecap/model.hpp"

namespace densecap {

struct LossWeights {
  double rpn_score = 0.1, rpn_box = 0.1, rec_score = 0.1, rec_box = 0.1, caption = 1.0;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double rpn_score = 0, rpn_box = 0, rec_score = 0, rec_box = 0, caption = 0, total = 0;
};

template <typename T>
struct LossTerms {
  Var<T> rpn_score, rpn_box, rec_score, rec_box, caption, total;

  LossBreakdown values() const {
    return {double(rpn_score.value().item()), double(rpn_box.value().item()),
            double(rec_score.value().item()), double(rec_box.value().item()),
            double(caption.value().item()),   double(total.value().item())};
  }
};

/// One training image: tensor, ground-truth boxes and encoded captions.
template <typename T>
struct TrainingSample {
  Tensor<T> image;
  std::vector<Box> boxes;
  std::vector<std::vector<int>> captions;
};

template <typename T>
TrainingSample<T> make_sample(const Image& img, const ImageRecord& rec, const Vocabulary& vocab) {
  TrainingSample<T> s;
  s.image = image_to_tensor<T>(img);
  for (const auto& r : rec.regions) {
    s.boxes.push_back(r.box);
    s.captions.push_back(vocab.encode(r.caption));
  }
  return s;
}

/// Weighted five-term objective on one region batch.
///
/// Score terms: mean binary logistic over all sampled regions at both
/// stages. Box terms: mean smooth-L1 over positives against encode(anchor,
/// gt) and encode(proposal, gt). Caption term: language-model loss of the
/// positives' codes against their matched captions. Without positives the
/// box and caption terms are constant zero.
template <typename T>
LossTerms<T> compute_loss(const RegionBatch<T>& rb, const RecognitionOutput<T>& rec,
                          const LmWeights<T>& lm, const std::vector<Box>& gt_boxes,
                          const std::vector<std::vector<int>>& gt_captions,
                          const LossWeights& w, bool score_rpn = true) {
  Tape<T>& tape = *rb.boxes.tape;
  const std::size_t B = rb.size(), P = rb.num_positives;
  require(B > 0, "compute_loss: empty region batch");
  std::vector<int> labels(B, 0);
  std::fill(labels.begin(), labels.begin() + std::ptrdiff_t(P), 1);
  auto zero = [&] { return tape.constant(Tensor<T>::scalar(T(0))); };

  LossTerms<T> L;
  L.rpn_score = score_rpn ? ops::binary_logistic(rb.scores, labels) : zero();
  L.rec_score = ops::binary_logistic(rec.scores, labels);
  if (P == 0) {
    L.rpn_box = zero(), L.rec_box = zero(), L.caption = zero();
  } else {
    std::vector<std::size_t> pos(P);
    std::iota(pos.begin(), pos.end(), std::size_t(0));
    Tensor<T> t1(Shape{P, 4}), t2(Shape{P, 4});
    const auto& bv = rb.boxes.value();
    std::vector<std::vector<int>> caps;
    for (std::size_t p = 0; p < P; ++p) {
      const Box& g = gt_boxes.at(rb.matched_gt[p]);
      const BoxDelta d1 = encode(rb.anchors[p], g), d2 = encode(box_row(bv, p), g);
      t1[p * 4] = T(d1.tx), t1[p * 4 + 1] = T(d1.ty), t1[p * 4 + 2] = T(d1.tw), t1[p * 4 + 3] = T(d1.th);
      t2[p * 4] = T(d2.tx), t2[p * 4 + 1] = T(d2.ty), t2[p * 4 + 2] = T(d2.tw), t2[p * 4 + 3] = T(d2.th);
      caps.push_back(gt_captions.at(rb.matched_gt[p]));
    }
    const std::span<const std::size_t> ps(pos);
    L.rpn_box = score_rpn ? ops::smooth_l1_loss(ops::gather_rows(rb.deltas, ps), t1) : zero();
    L.rec_box = ops::smooth_l1_loss(ops::gather_rows(rec.deltas, ps), t2);
    L.caption = w.caption != 0 ? caption_loss(lm, ops::gather_rows(rec.codes, ps), caps) : zero();
  }
  L.total = ops::add(
      ops::add(ops::add(ops::scale(L.rpn_score, T(w.rpn_score)), ops::scale(L.rpn_box, T(w.rpn_box))),
               ops::add(ops::scale(L.rec_score, T(w.rec_score)), ops::scale(L.rec_box, T(w.rec_box)))),
      ops::scale(L.caption, T(w.caption)));
  return L;
}

struct LossOptions {
  LossWeights weights;
  SamplingConfig sampling;
  /// Extract regions at the ground-truth boxes instead of the sampled
  /// proposals; the rpn terms become zero.
  bool use_gt_boxes = false;
};

/// Full train-mode forward pass and loss for one image.
template <typename T>
LossTerms<T> forward_loss(const DenseCapModel<T>& model, const Bound<T>& b,
                          const TrainingSample<T>& s, const LossOptions& opt,
                          std::mt19937_64& rng) {
  Tape<T>& tape = *b.vars.front().tape;
  Var<T> feats = model.backbone_forward(b, tape.constant(s.image));
  RegionBatch<T> rb;
  if (opt.use_gt_boxes) {
    rb = model.ground_truth_regions(feats, s.boxes);
  } else {
    auto rpn = model.rpn_head(b, feats);
    rb = model.localization_layer(feats, rpn, &s.boxes, opt.sampling, {}, rng);
  }
  auto rec = model.recognition_forward(b, rb.features, ops::Mode::kTrain, rng);
  return compute_loss(rb, rec, b.lm(), s.boxes, s.captions, opt.weights, !opt.use_gt_boxes);
}

// ---------------------------------------------------------------------------
// Optimizers

/// v <- mu v + g;  p <- p - lr v
template <typename T>
void sgd_momentum_step(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& v, double lr, double mu) {
  require(p.shape() == g.shape() && p.shape() == v.shape(), "sgd_momentum_step: shape mismatch ",
          shape_str(p.shape()), " / ", shape_str(g.shape()), " / ", shape_str(v.shape()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = T(mu * double(v[i]) + double(g[i]));
    p[i] = T(double(p[i]) - lr * double(v[i]));
  }
}

template <typename T>
struct AdamState {
  Tensor<T> m, v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update.
template <typename T>
void adam_step(Tensor<T>& p, const Tensor<T>& g, AdamState<T>& s, double lr, double beta1,
               double beta2, double eps) {
  require(p.shape() == g.shape() && p.shape() == s.m.shape() && p.shape() == s.v.shape(),
          "adam_step: shape mismatch ", shape_str(p.shape()), " / ", shape_str(g.shape()));
  ++s.step;
  const double c1 = 1.0 - std::pow(beta1, double(s.step));
  const double c2 = 1.0 - std::pow(beta2, double(s.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = double(g[i]);
    const double m = beta1 * double(s.m[i]) + (1.0 - beta1) * gi;
    const double v = beta2 * double(s.v[i]) + (1.0 - beta2) * gi * gi;
    s.m[i] = T(m);
    s.v[i] = T(v);
    p[i] = T(double(p[i]) - lr * (m / c1) / (std::sqrt(v / c2) + eps));
  }
}

struct TrainConfig {
  std::size_t iterations = 2000;
  double sgd_lr = 1e-3;
  double momentum = 0.9;
  double adam_lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  LossWeights weights;
  SamplingConfig sampling;
  bool use_gt_boxes = false;
  std::size_t finetune_after = 0;  // backbone updates start at this iteration
  std::vector<std::string> freeze;  // parameter name prefixes never updated
  double clip_norm = 10.0;          // 0 disables
  bool checked = false;
  std::size_t checkpoint_every = 500;
  std::size_t log_every = 1;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(sgd_lr >= 0 && adam_lr >= 0)) bad("learning rates must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) bad("momentum must be in [0, 1)");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) bad("betas must be in [0, 1)");
    if (!(eps > 0)) bad("eps must be positive");
    if (sampling.batch_size < 2) bad("batch_size must be >= 2");
    if (!(sampling.neg_iou <= sampling.pos_iou)) bad("neg_iou must not exceed pos_iou");
    const LossWeights& w = weights;
    if (w.rpn_score < 0 || w.rpn_box < 0 || w.rec_score < 0 || w.rec_box < 0 || w.caption < 0)
      bad("loss weights must be non-negative");
    if (!(clip_norm >= 0)) bad("clip_norm must be non-negative");
    if (log_every == 0) bad("log_every must be positive");
  }
};

enum class ParamGroup { kBackbone, kHead, kFrozen };

template <typename T>
struct OptimizerState {
  std::vector<ParamGroup> group;
  std::vector<Tensor<T>> velocity;   // backbone group
  std::vector<AdamState<T>> moments;  // head group
};

/// Backbone parameters are updated by SGD with momentum, all others by
/// Adam. Parameters matching a freeze prefix are never touched.
template <typename T>
OptimizerState<T> make_optimizer_state(const DenseCapModel<T>& model, const TrainConfig& cfg) {
  OptimizerState<T> st;
  for (const auto& p : model.params()) {
    bool frozen = false;
    for (const auto& f : cfg.freeze) frozen = frozen || p.name.rfind(f, 0) == 0;
    st.group.push_back(frozen ? ParamGroup::kFrozen
                       : p.name.rfind("backbone.", 0) == 0 ? ParamGroup::kBackbone
                                                           : ParamGroup::kHead);
    st.velocity.emplace_back(p.value.shape());
    st.moments.push_back({Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape()), 0});
  }
  return st;
}

struct StepReport {
  std::size_t iteration = 0;
  std::size_t image = 0;
  LossBreakdown loss;
  double grad_norm = 0;
  std::size_t positives = 0;
};

/// Per-iteration randomness: the image order within epoch e and all
/// sampling/dropout draws of iteration i come from generators seeded by
/// (seed, e) and (seed, i), so a resumed run repeats an uninterrupted one.
template <typename T>
class Trainer {
 public:
  Trainer(DenseCapModel<T>& model, TrainConfig cfg, std::uint64_t seed)
      : model_(model), cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    state_ = make_optimizer_state(model_, cfg_);
  }

  std::size_t iteration() const noexcept { return iteration_; }
  void set_iteration(std::size_t it) noexcept { iteration_ = it; }
  OptimizerState<T>& state() noexcept { return state_; }
  const TrainConfig& config() const noexcept { return cfg_; }

  std::size_t image_for(std::size_t it, std::size_t n) const {
    const std::size_t epoch = it / n, pos = it % n;
    if (epoch != cached_epoch_ || order_.size() != n) {
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), std::size_t(0));
      std::mt19937_64 rng(splitmix64(seed_ ^ (0x5eed0000ULL + epoch)));
      shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    return order_[pos];
  }

  /// Forward, backward and parameter update on the next image.
  StepReport step(const std::vector<TrainingSample<T>>& data) {
    require(!data.empty(), "train: empty dataset");
    StepReport rep;
    rep.iteration = iteration_;
    rep.image = image_for(iteration_, data.size());
    const TrainingSample<T>& s = data[rep.image];
    require(!s.boxes.empty(), "train: image without regions");

    std::mt19937_64 rng(splitmix64(seed_ + 0x9e37ULL * (iteration_ + 1)));
    Tape<T> tape;
    tape.set_checked(cfg_.checked);
    const Bound<T> b = model_.bind(tape, true);
    LossOptions lo{cfg_.weights, cfg_.sampling, cfg_.use_gt_boxes};
    LossTerms<T> L = forward_loss(model_, b, s, lo, rng);
    rep.loss = L.values();
    check_finite(rep.loss);
    tape.backward(L.total);

    auto& params = model_.params();
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    double sq = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      grads.push_back(tape.grad(b[i]));
      if (state_.group[i] == ParamGroup::kFrozen) continue;
      for (T g : grads.back().data()) sq += double(g) * double(g);
    }
    rep.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rep.grad_norm))
      throw NumericError("iteration " + std::to_string(iteration_) + ": non-finite gradient norm");
    if (cfg_.clip_norm > 0 && rep.grad_norm > cfg_.clip_norm) {
      const T f = T(cfg_.clip_norm / rep.grad_norm);
      for (auto& g : grads)
        for (auto& v : g.data()) v *= f;
    }
    const bool backbone_on = iteration_ >= cfg_.finetune_after;
    for (std::size_t i = 0; i < params.size(); ++i) {
      switch (state_.group[i]) {
        case ParamGroup::kFrozen:
          break;
        case ParamGroup::kBackbone:
          if (backbone_on)
            sgd_momentum_step(params[i].value, grads[i], state_.velocity[i], cfg_.sgd_lr, cfg_.momentum);
          break;
        case ParamGroup::kHead:
          adam_step(params[i].value, grads[i], state_.moments[i], cfg_.adam_lr, cfg_.beta1,
                    cfg_.beta2, cfg_.eps);
          break;
      }
    }
    ++iteration_;
    return rep;
  }

 private:
  void check_finite(const LossBreakdown& l) const {
    const std::pair<const char*, double> terms[] = {
        {"rpn_score", l.rpn_score}, {"rpn_box", l.rpn_box}, {"rec_score", l.rec_score},
        {"rec_box", l.rec_box},     {"caption", l.caption}, {"total", l.total}};
    for (const auto& [name, v] : terms)
      if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "iteration " << iteration_ << ": non-finite loss term " << name << " (";
        for (const auto& [n2, v2] : terms) os << ' ' << n2 << '=' << v2;
        os << " )";
        throw NumericError(os.str());
      }
  }

  DenseCapModel<T>& model_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  std::size_t iteration_ = 0;
  OptimizerState<T> state_;
  mutable std::vector<std::size_t> order_;
  mutable std::size_t cached_epoch_ = std::size_t(-1);
};

/// Expected loss of a freshly initialized model: logits near zero give ln 2
/// per score term and ln K per caption step; near-zero deltas leave the box
/// terms at the smooth-L1 of encode(anchor, gt) over sampled positives,
/// averaged over `max_images` training images.
template <typename T>
double estimate_initial_loss(const std::vector<TrainingSample<T>>& data, const ModelConfig& mc,
                             const TrainConfig& tc, std::size_t max_images = 50) {
  require(!data.empty(), "estimate_initial_loss: empty dataset");
  const LossWeights& w = tc.weights;
  double box = 0;
  std::size_t n = 0;
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < data.size() && n < max_images; ++i, ++n) {
    const std::size_t s = mc.stride();
    const std::size_t fh = data[i].image.shape()[1] / s, fw = data[i].image.shape()[2] / s;
    if (tc.use_gt_boxes) continue;
    const auto anchors = generate_anchors(
        AnchorGrid{double(s), anchor_shapes(mc.anchor_scales, mc.anchor_ratios), fw, fh});
    const auto mb = sample_minibatch(anchors, data[i].boxes, tc.sampling, rng);
    double acc = 0;
    for (std::size_t p = 0; p < mb.positives.size(); ++p)
      acc += smooth_l1(BoxDelta{}, encode(anchors[mb.positives[p]], data[i].boxes[mb.matched_gt[p]]));
    if (!mb.positives.empty()) box += acc / double(mb.positives.size());
  }
  box /= double(n);
  const double ln2 = std::log(2.0);
  const double rpn = tc.use_gt_boxes ? 0.0 : w.rpn_score * ln2 + w.rpn_box * box;
  return rpn + w.rec_score * ln2 + w.rec_box * box + w.caption * std::log(double(mc.vocab_classes));
}

// ---------------------------------------------------------------------------
// Metrics log

/// Tab-separated, one header line then one line per logged iteration.
class MetricsLog {
 public:
  static constexpr const char* kHeader =
      "iteration\ttotal\trpn_score\trpn_box\trec_score\trec_box\tcaption\tgrad_norm\twall_seconds";

  explicit MetricsLog(const std::string& path, bool append) : path_(path) {
    const bool exists = std::ifstream(path).good();
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw DataError("cannot open metrics log " + path);
    if (!append || !exists) out_ << kHeader << '\n';
  }

  void write(const StepReport& r, double wall) {
    char buf[512];
    const LossBreakdown& l = r.loss;
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.3f\n",
                  r.iteration, l.total, l.rpn_score, l.rpn_box, l.rec_score, l.rec_box, l.caption,
                  r.grad_norm, wall);
    out_ << buf;
    out_.flush();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

struct MetricsRow {
  std::size_t iteration = 0;
  LossBreakdown loss;
  double grad_norm = 0, wall_seconds = 0;
};

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read metrics log " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (++lineno == 1 || line.empty()) continue;
    MetricsRow r;
    LossBreakdown& l = r.loss;
    if (std::sscanf(line.c_str(), "%zu\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf", &r.iteration,
                    &l.total, &l.rpn_score, &l.rpn_box, &l.rec_score, &l.rec_box, &l.caption,
                    &r.grad_norm, &r.wall_seconds) != 9)
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed metrics line");
    rows.push_back(r);
  }
  return rows;
}

/// Moving average with a trailing window, used for plotting and for the
/// end-of-training loss.
inline std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / double(std::min(i + 1, window));
  }
  return out;
}

inline Image render_loss_curve(const std::vector<MetricsRow>& rows, std::size_t window = 50) {
  std::vector<double> total, caption, det;
  for (const auto& r : rows) {
    total.push_back(r.loss.total);
    caption.push_back(r.loss.caption);
    det.push_back(r.loss.total - r.loss.caption);
  }
  return render_line_chart({smooth(total, window), smooth(caption, window), smooth(det, window)},
                           {{200, 30, 30}, {30, 90, 200}, {30, 150, 60}},
                           {"total", "caption", "detection"});
}

}  // namespace densecap
