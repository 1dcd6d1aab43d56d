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

// Fully convolutional localization network:
//
//   image -> backbone -> features C x H' x W'
//         -> rpn head -> per-anchor score + deltas
//         -> localization layer (sample or NMS, bilinear extraction)
//         -> recognition (two FC layers -> code, refined score, refined deltas)
//         -> language model over codes

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "densecap/bilinear.hpp"
#include "densecap/geometry.hpp"
#include "densecap/language_model.hpp"
#include "densecap/ops.hpp"

namespace densecap {

struct ModelConfig {
  std::vector<std::size_t> conv_channels{16, 16, 32, 32};
  std::vector<std::size_t> pool_after{1, 3};  // 2x2 max pool after these conv layers
  std::vector<double> anchor_scales{16, 32, 64, 128};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  std::size_t rpn_hidden = 64;
  std::size_t roi_width = 7, roi_height = 7;
  std::size_t fc_hidden = 256;
  std::size_t code_dim = 256;
  std::size_t lm_hidden = 64;
  std::size_t vocab_classes = 0;  // END + UNK + words
  double dropout = 0.0;
  double init_std = 0.01;  // RPN and the recognition score/box head
  double caption_init_std = 0.1;  // recognition FC layers and the language model

  std::size_t stride() const { return std::size_t(1) << pool_after.size(); }
  std::size_t channels() const { return conv_channels.back(); }
  std::size_t num_anchor_shapes() const { return anchor_scales.size() * anchor_ratios.size(); }

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (conv_channels.empty()) bad("conv_channels must not be empty");
    for (auto c : conv_channels)
      if (c == 0) bad("conv_channels entries must be positive");
    for (std::size_t i = 0; i < pool_after.size(); ++i) {
      if (pool_after[i] >= conv_channels.size()) bad("pool_after index out of range");
      if (i > 0 && pool_after[i] <= pool_after[i - 1]) bad("pool_after must be increasing");
    }
    if (anchor_scales.empty() || anchor_ratios.empty()) bad("anchors need scales and ratios");
    for (double v : anchor_scales)
      if (!(v > 0)) bad("anchor scales must be positive");
    for (double v : anchor_ratios)
      if (!(v > 0)) bad("anchor ratios must be positive");
    if (rpn_hidden == 0 || roi_width == 0 || roi_height == 0 || fc_hidden == 0 ||
        code_dim == 0 || lm_hidden == 0)
      bad("layer sizes must be positive");
    if (vocab_classes < 3) bad("vocab_classes must cover END, UNK and at least one word");
    if (!(dropout >= 0 && dropout < 1)) bad("dropout must be in [0, 1)");
    if (!(init_std > 0)) bad("init_std must be positive");
    if (!(caption_init_std > 0)) bad("caption_init_std must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Parameter indices by role.
struct ParamLayout {
  std::vector<std::size_t> conv_w, conv_b;
  std::size_t rpn_conv_w = 0, rpn_conv_b = 0, rpn_out_w = 0, rpn_out_b = 0;
  std::size_t fc1_w = 0, fc1_b = 0, fc2_w = 0, fc2_b = 0, head_w = 0, head_b = 0;
  std::size_t cond_w = 0, cond_b = 0, embed = 0, lstm_wx = 0, lstm_wh = 0, lstm_b = 0;
  std::size_t out_w = 0, out_b = 0;
};

/// Parameters placed on one tape for one forward pass.
template <typename T>
struct Bound {
  std::vector<Var<T>> vars;
  const ParamLayout* layout = nullptr;

  Var<T> operator[](std::size_t i) const { return vars[i]; }
  LmWeights<T> lm() const {
    const ParamLayout& L = *layout;
    return {vars[L.cond_w], vars[L.cond_b], vars[L.embed],
            {vars[L.lstm_wx], vars[L.lstm_wh], vars[L.lstm_b]}, vars[L.out_w], vars[L.out_b]};
  }
};

template <typename T>
struct RpnOutput {
  Var<T> raw;     // 5k x H' x W'; channel a = score of shape a, k + 4a + j = delta j
  Var<T> scores;  // N logits, N = H' W' k in anchor order
  Var<T> deltas;  // N x 4
};

/// Regions leaving the localization layer. In train mode the first
/// `num_positives` rows are positives.
template <typename T>
struct RegionBatch {
  Var<T> boxes;     // B x 4 (xc, yc, w, h)
  Var<T> scores;    // B logits
  Var<T> deltas;    // B x 4 rpn deltas of the selected anchors
  Var<T> features;  // B x C x Y x X
  std::vector<Box> anchors;
  std::vector<std::size_t> anchor_index;
  std::size_t num_positives = 0;
  std::vector<std::size_t> matched_gt;  // parallel to the positives
  bool sampled = false;                 // train-sampled rather than NMS-selected

  std::size_t size() const { return anchors.size(); }
};

template <typename T>
struct RecognitionOutput {
  Var<T> codes;   // B x D
  Var<T> scores;  // B logits
  Var<T> deltas;  // B x 4
};

struct InferenceOptions {
  std::size_t rpn_keep = 300;
  double rpn_nms = 0.7;
  double final_nms = 0.3;
  std::size_t max_regions = 20;
  std::size_t max_caption_len = 12;
};

struct Detection {
  Box box;
  double score = 0;  // probability
  Box proposal;
  std::vector<int> tokens;
};

/// Proposals kept by the test-mode localization layer, with their
/// recognition outputs.
template <typename T>
struct ProposalSet {
  std::vector<Box> proposals;
  std::vector<Box> refined;
  std::vector<double> scores;  // refined probabilities
  Tensor<T> codes;             // P x D
};

template <typename T>
class DenseCapModel {
 public:
  DenseCapModel() = default;

  /// Backbone convs use He initialization. The RPN and the score/box head
  /// draw from N(0, init_std); the recognition FC layers and the language
  /// model from N(0, caption_init_std). Biases are zero except the LSTM
  /// forget gate, which starts at 1.
  DenseCapModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    auto normal = [&](Shape shape, double std) {
      Tensor<T> t(std::move(shape));
      for (auto& v : t.data()) v = T(standard_normal(rng) * std);
      return t;
    };
    const double s = cfg_.init_std, sc = cfg_.caption_init_std;
    std::size_t cin = 3;
    for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
      const std::size_t c = cfg_.conv_channels[i];
      L_.conv_w.push_back(add("backbone.conv" + std::to_string(i) + ".weight",
                              normal({c, cin, 3, 3}, std::sqrt(2.0 / double(cin * 9)))));
      L_.conv_b.push_back(add("backbone.conv" + std::to_string(i) + ".bias", Tensor<T>(Shape{c})));
      cin = c;
    }
    const std::size_t C = cfg_.channels(), k = cfg_.num_anchor_shapes(), H = cfg_.rpn_hidden;
    L_.rpn_conv_w = add("rpn.conv.weight", normal({H, C, 3, 3}, s));
    L_.rpn_conv_b = add("rpn.conv.bias", Tensor<T>(Shape{H}));
    L_.rpn_out_w = add("rpn.out.weight", normal({5 * k, H, 1, 1}, s));
    L_.rpn_out_b = add("rpn.out.bias", Tensor<T>(Shape{5 * k}));
    const std::size_t flat = C * cfg_.roi_width * cfg_.roi_height, D = cfg_.code_dim;
    L_.fc1_w = add("recog.fc1.weight", normal({flat, cfg_.fc_hidden}, sc));
    L_.fc1_b = add("recog.fc1.bias", Tensor<T>(Shape{cfg_.fc_hidden}));
    L_.fc2_w = add("recog.fc2.weight", normal({cfg_.fc_hidden, D}, sc));
    L_.fc2_b = add("recog.fc2.bias", Tensor<T>(Shape{D}));
    L_.head_w = add("recog.head.weight", normal({D, 5}, s));
    L_.head_b = add("recog.head.bias", Tensor<T>(Shape{5}));
    const std::size_t E = cfg_.lm_hidden, K = cfg_.vocab_classes;
    L_.cond_w = add("lm.cond.weight", normal({D, E}, sc));
    L_.cond_b = add("lm.cond.bias", Tensor<T>(Shape{E}));
    L_.embed = add("lm.embed", normal({K + 1, E}, sc));
    L_.lstm_wx = add("lm.lstm.w_input", normal({E, 4 * E}, sc));
    L_.lstm_wh = add("lm.lstm.w_hidden", normal({E, 4 * E}, sc));
    Tensor<T> gate_bias(Shape{4 * E});
    for (std::size_t j = E; j < 2 * E; ++j) gate_bias[j] = T(1);
    L_.lstm_b = add("lm.lstm.bias", std::move(gate_bias));
    L_.out_w = add("lm.out.weight", normal({E, K}, sc));
    L_.out_b = add("lm.out.bias", Tensor<T>(Shape{K}));
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return L_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw ContractError("unknown parameter " + name);
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Places every parameter on `tape`, as variables when `trainable`.
  Bound<T> bind(Tape<T>& tape, bool trainable) const {
    Bound<T> b;
    b.layout = &L_;
    for (const auto& p : params_)
      b.vars.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
    return b;
  }

  /// Language-model parameters only, as constants.
  LmWeights<T> bind_lm(Tape<T>& tape) const {
    auto c = [&](std::size_t i) { return tape.constant(params_[i].value); };
    return {c(L_.cond_w), c(L_.cond_b), c(L_.embed), {c(L_.lstm_wx), c(L_.lstm_wh), c(L_.lstm_b)},
            c(L_.out_w), c(L_.out_b)};
  }

  AnchorGrid anchor_grid(std::size_t feat_w, std::size_t feat_h) const {
    return AnchorGrid{double(cfg_.stride()), anchor_shapes(cfg_.anchor_scales, cfg_.anchor_ratios),
                      feat_w, feat_h};
  }

  /// 3 x H x W -> C x floor(H/s) x floor(W/s). The input is cropped to a
  /// multiple of the stride first.
  Var<T> backbone_forward(const Bound<T>& b, Var<T> image) const {
    const Shape& is = image.shape();
    const std::size_t s = cfg_.stride();
    require(is.size() == 3 && is[0] == 3, "backbone: image must be 3 x H x W, got ",
            shape_str(is));
    require(is[1] >= s && is[2] >= s, "backbone: image ", is[2], "x", is[1],
            " smaller than the stride ", s);
    const std::size_t H = is[1] / s * s, W = is[2] / s * s;
    Var<T> x = image;
    if (H != is[1] || W != is[2]) {
      std::vector<std::size_t> idx;
      idx.reserve(3 * H * W);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx) idx.push_back((c * is[1] + y) * is[2] + xx);
      x = ops::gather(x, std::move(idx), Shape{3, H, W});
    }
    std::size_t next_pool = 0;
    for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
      x = ops::relu(ops::conv2d(x, b[L_.conv_w[i]], b[L_.conv_b[i]], 1, 1));
      if (next_pool < cfg_.pool_after.size() && cfg_.pool_after[next_pool] == i) {
        x = ops::maxpool2d(x, 2, 2);
        ++next_pool;
      }
    }
    return x;
  }

  /// 3x3 conv + relu, then 1x1 conv to 5k channels.
  RpnOutput<T> rpn_head(const Bound<T>& b, Var<T> features) const {
    Var<T> h = ops::relu(ops::conv2d(features, b[L_.rpn_conv_w], b[L_.rpn_conv_b], 1, 1));
    RpnOutput<T> out;
    out.raw = ops::conv2d(h, b[L_.rpn_out_w], b[L_.rpn_out_b], 1, 0);
    const std::size_t k = cfg_.num_anchor_shapes();
    const std::size_t Hf = features.shape()[1], Wf = features.shape()[2], plane = Hf * Wf;
    std::vector<std::size_t> si, di;
    si.reserve(plane * k);
    di.reserve(plane * k * 4);
    for (std::size_t cell = 0; cell < plane; ++cell)
      for (std::size_t a = 0; a < k; ++a) {
        si.push_back(a * plane + cell);
        for (std::size_t j = 0; j < 4; ++j) di.push_back((k + 4 * a + j) * plane + cell);
      }
    out.scores = ops::gather(out.raw, std::move(si), Shape{plane * k});
    out.deltas = ops::gather(out.raw, std::move(di), Shape{plane * k, 4});
    return out;
  }

  /// Selects regions and extracts their features. Train mode samples a
  /// minibatch against `gts` on the decoded proposals; test mode keeps the
  /// `opts.rpn_keep` most confident proposals after NMS.
  RegionBatch<T> localization_layer(Var<T> features, const RpnOutput<T>& rpn,
                                    const std::vector<Box>* gts, const SamplingConfig& sampling,
                                    const InferenceOptions& opts, std::mt19937_64& rng) const {
    const std::size_t Hf = features.shape()[1], Wf = features.shape()[2];
    const std::vector<Box> anchors = generate_anchors(anchor_grid(Wf, Hf));
    const auto& dv = rpn.deltas.value();
    std::vector<Box> proposals(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i)
      proposals[i] = decode(anchors[i], {double(dv[i * 4]), double(dv[i * 4 + 1]),
                                         double(dv[i * 4 + 2]), double(dv[i * 4 + 3])});

    RegionBatch<T> rb;
    if (gts) {
      const SampledMinibatch mb = sample_minibatch(proposals, *gts, sampling, rng);
      rb.anchor_index = mb.positives;
      rb.anchor_index.insert(rb.anchor_index.end(), mb.negatives.begin(), mb.negatives.end());
      rb.num_positives = mb.positives.size();
      rb.matched_gt = mb.matched_gt;
      rb.sampled = true;
    } else {
      const auto& sv = rpn.scores.value();
      std::vector<double> sc(sv.data().begin(), sv.data().end());
      rb.anchor_index = nms(proposals, sc, opts.rpn_nms, opts.rpn_keep);
    }
    require(!rb.anchor_index.empty(), "localization layer selected no regions");
    for (std::size_t i : rb.anchor_index) rb.anchors.push_back(anchors[i]);
    rb.deltas = ops::gather_rows(rpn.deltas, std::span<const std::size_t>(rb.anchor_index));
    rb.scores = ops::gather(rpn.scores, rb.anchor_index, Shape{rb.anchor_index.size()});
    rb.boxes = decode_boxes(std::span<const Box>(rb.anchors), rb.deltas);
    rb.features = extract_regions(features, rb.boxes, double(cfg_.stride()), cfg_.roi_width,
                                  cfg_.roi_height);
    return rb;
  }

  /// Regions placed exactly on ground-truth boxes; all of them positive.
  RegionBatch<T> ground_truth_regions(Var<T> features, const std::vector<Box>& gts) const {
    require(!gts.empty(), "ground_truth_regions: no boxes");
    Tape<T>& tape = *features.tape;
    RegionBatch<T> rb;
    Tensor<T> bt(Shape{gts.size(), 4});
    for (std::size_t i = 0; i < gts.size(); ++i) {
      bt[i * 4] = T(gts[i].xc), bt[i * 4 + 1] = T(gts[i].yc);
      bt[i * 4 + 2] = T(gts[i].w), bt[i * 4 + 3] = T(gts[i].h);
      rb.matched_gt.push_back(i);
    }
    rb.anchors = gts;
    rb.anchor_index.assign(gts.size(), 0);
    rb.num_positives = gts.size();
    rb.boxes = tape.constant(bt);
    rb.deltas = tape.constant(Tensor<T>(Shape{gts.size(), 4}));
    rb.scores = tape.constant(Tensor<T>(Shape{gts.size()}));
    rb.features = extract_regions(features, rb.boxes, double(cfg_.stride()), cfg_.roi_width,
                                  cfg_.roi_height);
    return rb;
  }

  RecognitionOutput<T> recognition_forward(const Bound<T>& b, Var<T> region_features,
                                           ops::Mode mode, std::mt19937_64& rng) const {
    const std::size_t B = region_features.shape()[0];
    Var<T> x = ops::reshape(region_features, Shape{B, region_features.size() / B});
    x = ops::dropout(ops::relu(ops::linear(x, b[L_.fc1_w], b[L_.fc1_b])), cfg_.dropout, mode, rng);
    x = ops::dropout(ops::relu(ops::linear(x, b[L_.fc2_w], b[L_.fc2_b])), cfg_.dropout, mode, rng);
    Var<T> head = ops::linear(x, b[L_.head_w], b[L_.head_b]);
    return {x, ops::reshape(ops::slice_cols(head, 0, 1), Shape{B}), ops::slice_cols(head, 1, 4)};
  }

  /// Test-mode pipeline up to the recognition outputs for `keep` proposals.
  ProposalSet<T> propose(const Tensor<T>& image, std::size_t keep, double rpn_nms) const {
    Tape<T> tape;
    const Bound<T> b = bind(tape, false);
    std::mt19937_64 rng(0);
    Var<T> feats = backbone_forward(b, tape.constant(image));
    auto rpn = rpn_head(b, feats);
    InferenceOptions o;
    o.rpn_keep = keep;
    o.rpn_nms = rpn_nms;
    auto rb = localization_layer(feats, rpn, nullptr, {}, o, rng);
    auto rec = recognition_forward(b, rb.features, ops::Mode::kEval, rng);
    ProposalSet<T> ps;
    ps.proposals = box_rows(rb.boxes.value());
    const auto& dv = rec.deltas.value();
    const auto& sv = rec.scores.value();
    for (std::size_t i = 0; i < ps.proposals.size(); ++i) {
      ps.refined.push_back(decode(ps.proposals[i], {double(dv[i * 4]), double(dv[i * 4 + 1]),
                                                    double(dv[i * 4 + 2]), double(dv[i * 4 + 3])}));
      ps.scores.push_back(1.0 / (1.0 + std::exp(-double(sv[i]))));
    }
    ps.codes = rec.codes.value();
    return ps;
  }

  /// Dense captioning of one image: proposals, recognition, final NMS on
  /// refined boxes, greedy captions. Boxes are clipped to the image.
  std::vector<Detection> describe(const Tensor<T>& image, const InferenceOptions& opts) const {
    ProposalSet<T> ps = propose(image, opts.rpn_keep, opts.rpn_nms);
    const auto keep = nms(ps.refined, ps.scores, opts.final_nms, opts.max_regions);
    std::vector<Detection> out;
    if (keep.empty()) return out;
    const std::size_t D = cfg_.code_dim;
    Tensor<T> codes(Shape{keep.size(), D});
    for (std::size_t r = 0; r < keep.size(); ++r)
      std::copy_n(&ps.codes[keep[r] * D], D, &codes[r * D]);
    Tape<T> tape;
    auto caps = generate(bind_lm(tape), tape.constant(codes), opts.max_caption_len);
    const double W = double(image.shape()[2]), H = double(image.shape()[1]);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      Detection d;
      d.box = ps.refined[keep[r]].clipped(W, H);
      d.score = ps.scores[keep[r]];
      d.proposal = ps.proposals[keep[r]];
      d.tokens = std::move(caps[r]);
      out.push_back(std::move(d));
    }
    return out;
  }

 private:
  std::size_t add(std::string name, Tensor<T> v) {
    params_.push_back({std::move(name), std::move(v)});
    return params_.size() - 1;
  }

  ModelConfig cfg_;
  ParamLayout L_;
  std::vector<Parameter<T>> params_;
};

}  // namespace densecap
