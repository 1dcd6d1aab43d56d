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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <vector>

#include "densecap/checkpoint.hpp"
#include "densecap/config.hpp"
#include "densecap/data_synth.hpp"
#include "densecap/training.hpp"
#include "grad_check.hpp"
#include "model_checks.hpp"

namespace densecap {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

struct Toy {
  Vocabulary vocab;
  std::vector<TrainingSample<double>> data;
};

Toy toy_data(std::size_t n, std::uint64_t seed) {
  SynthConfig sc;
  std::mt19937_64 rng(seed);
  std::vector<Scene> scenes;
  std::vector<std::string> caps;
  for (std::size_t i = 0; i < n; ++i) {
    scenes.push_back(generate_scene(rng, sc));
    for (const auto& r : scenes.back().regions) caps.push_back(r.caption);
  }
  Toy t{build_vocabulary(caps, 1), {}};
  for (const auto& s : scenes) {
    TrainingSample<double> ts;
    ts.image = image_to_tensor<double>(s.image);
    for (const auto& r : s.regions) {
      ts.boxes.push_back(r.box);
      ts.captions.push_back(t.vocab.encode(r.caption));
    }
    t.data.push_back(std::move(ts));
  }
  return t;
}

ModelConfig small_config(const Vocabulary& v) {
  ModelConfig c;
  c.conv_channels = {4, 4, 8};
  c.pool_after = {0, 2};
  c.rpn_hidden = 8;
  c.fc_hidden = 16;
  c.code_dim = 16;
  c.lm_hidden = 8;
  c.vocab_classes = v.output_size();
  return c;
}

LossTerms<double> loss_on(const DenseCapModel<double>& m, Tape<double>& tape, const TrainingSample<double>& s,
                          const LossOptions& o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return forward_loss(m, m.bind(tape, true), s, o, rng);
}

// ---------------------------------------------------------------------------
// Optimizers

TEST(Sgd, RecurrenceExamples) {
  Tensor<double> p(Shape{3}, {1, -2, 3}), v(Shape{3}), zero(Shape{3});
  const Tensor<double> p0 = p;
  sgd_momentum_step(p, zero, v, 0.1, 0.9);
  EXPECT_EQ(p, p0);
  const Tensor<double> g(Shape{3}, {0.5, -1, 2});
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], p0[i] - 0.1 * g[i], 1e-15);
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i] - p0[i], -0.1 * g[i] * (2 + 0.9), 1e-14);
  Tensor<double> bad(Shape{2});
  EXPECT_THROW(sgd_momentum_step(p, bad, v, 0.1, 0.9), ContractError);
}

TEST(Adam, FirstStepAndScaleInvariance) {
  Tensor<double> zero(Shape{3});
  AdamState<double> st{Tensor<double>(Shape{3}), Tensor<double>(Shape{3}), 0};
  Tensor<double> p(Shape{3}, {1, 2, 3});
  const Tensor<double> p0 = p;
  adam_step(p, zero, st, 1e-3, 0.9, 0.99, 1e-8);
  EXPECT_EQ(p, p0);

  const Tensor<double> g(Shape{3}, {0.5, -4, 1e-3});
  for (double scale : {1.0, 10.0, 1e3}) {
    Tensor<double> q = p0, gs = g;
    for (auto& x : gs.data()) x *= scale;
    AdamState<double> s{Tensor<double>(Shape{3}), Tensor<double>(Shape{3}), 0};
    adam_step(q, gs, s, 1e-3, 0.9, 0.99, 1e-8);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(q[i] - p0[i], -1e-3 * (g[i] > 0 ? 1 : -1), 1e-7);
    EXPECT_EQ(s.step, 1u);
  }
  AdamState<double> bad{Tensor<double>(Shape{2}), Tensor<double>(Shape{2}), 0};
  EXPECT_THROW(adam_step(p, g, bad, 1e-3, 0.9, 0.99, 1e-8), ContractError);
}

// ---------------------------------------------------------------------------
// Loss

TEST(Loss, ZeroHeadsGiveClosedForms) {
  const Toy t = toy_data(1, 1);
  DenseCapModel<double> m(small_config(t.vocab), 1);
  for (auto& p : m.params())
    if (p.name.rfind("backbone.", 0) != 0) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
  Tape<double> tape;
  const auto L = loss_on(m, tape, t.data[0], {}, 3).values();
  EXPECT_NEAR(L.rpn_score, std::log(2.0), 1e-12);
  EXPECT_NEAR(L.rec_score, std::log(2.0), 1e-12);
  EXPECT_NEAR(L.caption, std::log(double(t.vocab.output_size())), 1e-12);
  EXPECT_GE(L.rpn_box, 0.0);
  EXPECT_NEAR(L.rec_box, L.rpn_box, 1e-12);
}

TEST(Loss, WeightLinearity) {
  const Toy t = toy_data(1, 2);
  const DenseCapModel<double> m(small_config(t.vocab), 2);
  LossOptions a, b;
  b.weights.rpn_score = b.weights.rpn_box = b.weights.rec_score = b.weights.rec_box = 0.2;
  Tape<double> tape;
  const auto la = loss_on(m, tape, t.data[0], a, 5).values();
  const auto lb = loss_on(m, tape, t.data[0], b, 5).values();
  EXPECT_NEAR(lb.total - lb.caption, 2 * (la.total - la.caption), 1e-12);
  EXPECT_NEAR(la.total, 0.1 * (la.rpn_score + la.rpn_box + la.rec_score + la.rec_box) + la.caption, 1e-12);
}

TEST(Loss, TotalGradientIsWeightedSumOfTerms) {
  const Toy t = toy_data(1, 3);
  const DenseCapModel<double> m(small_config(t.vocab), 3);
  auto grads_for = [&](LossWeights w) {
    Tape<double> tape;
    std::mt19937_64 rng(9);
    const auto b = m.bind(tape, true);
    LossOptions o;
    o.weights = w;
    auto L = forward_loss(m, b, t.data[0], o, rng);
    tape.backward(L.total);
    std::vector<double> g;
    for (std::size_t i = 0; i < b.vars.size(); ++i) {
      const Tensor<double> grad = tape.grad(b[i]);
      g.insert(g.end(), grad.data().begin(), grad.data().end());
    }
    return g;
  };
  const LossWeights full;
  const auto all = grads_for(full);
  std::vector<double> sum(all.size(), 0.0);
  for (int term = 0; term < 5; ++term) {
    LossWeights w{0, 0, 0, 0, 0};
    double* f[] = {&w.rpn_score, &w.rpn_box, &w.rec_score, &w.rec_box, &w.caption};
    const double* src[] = {&full.rpn_score, &full.rpn_box, &full.rec_score, &full.rec_box, &full.caption};
    *f[term] = *src[term];
    const auto g = grads_for(w);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  double worst = 0;
  for (std::size_t i = 0; i < all.size(); ++i) worst = std::max(worst, std::abs(all[i] - sum[i]));
  EXPECT_LT(worst, 1e-12);
}

TEST(Loss, InvariantToGroundTruthOrder) {
  const Toy t = toy_data(4, 4);
  const DenseCapModel<double> m(small_config(t.vocab), 4);
  for (const auto& s : t.data) {
    TrainingSample<double> r = s;
    std::reverse(r.boxes.begin(), r.boxes.end());
    std::reverse(r.captions.begin(), r.captions.end());
    Tape<double> tape;
    const auto a = loss_on(m, tape, s, {}, 11).values();
    const auto b = loss_on(m, tape, r, {}, 11).values();
    EXPECT_NEAR(a.total, b.total, 1e-12);
    EXPECT_NEAR(a.caption, b.caption, 1e-12);
    EXPECT_NEAR(a.rec_box, b.rec_box, 1e-12);
  }
}

TEST(Loss, NoPositivesZeroBoxAndCaptionTerms) {
  const Toy t = toy_data(1, 5);
  const DenseCapModel<double> m(small_config(t.vocab), 5);
  Tape<double> tape;
  std::mt19937_64 rng(1);
  const auto b = m.bind(tape, true);
  auto feats = m.backbone_forward(b, tape.constant(t.data[0].image));
  auto rpn = m.rpn_head(b, feats);
  auto rb = m.localization_layer(feats, rpn, &t.data[0].boxes, {}, {}, rng);
  rb.num_positives = 0;
  rb.matched_gt.clear();
  auto rec = m.recognition_forward(b, rb.features, ops::Mode::kTrain, rng);
  auto L = compute_loss(rb, rec, b.lm(), t.data[0].boxes, t.data[0].captions, {});
  EXPECT_EQ(L.rpn_box.value().item(), 0.0);
  EXPECT_EQ(L.rec_box.value().item(), 0.0);
  EXPECT_EQ(L.caption.value().item(), 0.0);
  EXPECT_GT(L.rpn_score.value().item(), 0.0);
  tape.backward(L.total);
  for (std::size_t i : {m.layout().cond_w, m.layout().out_w, m.layout().embed}) {
    const Tensor<double> grad = tape.grad(b[i]);
    for (double g : grad.data()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Loss, InitialEstimateWithinTwentyPercent) {
  const Toy t = toy_data(12, 6);
  ModelConfig mc = small_config(t.vocab);
  const DenseCapModel<double> m(mc, 6);
  const double est = estimate_initial_loss(t.data, mc, TrainConfig{});
  double mean = 0;
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    Tape<double> tape;
    mean += loss_on(m, tape, t.data[i], {}, i).values().total;
  }
  mean /= double(t.data.size());
  EXPECT_NEAR(mean, est, 0.2 * est);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Trainer, DegenerateModesTrain) {
  const Toy t = toy_data(3, 7);
  {
    DenseCapModel<double> m(small_config(t.vocab), 7);
    TrainConfig c;
    c.weights.caption = 0;
    Trainer<double> tr(m, c, 1);
    for (int i = 0; i < 4; ++i) {
      const auto r = tr.step(t.data);
      EXPECT_EQ(r.loss.caption, 0.0);
      EXPECT_TRUE(std::isfinite(r.loss.total));
    }
  }
  {
    DenseCapModel<double> m(small_config(t.vocab), 7);
    TrainConfig c;
    c.use_gt_boxes = true;
    c.weights = {0, 0, 0, 0, 1.0};
    Trainer<double> tr(m, c, 1);
    double first = 0, last = 0;
    for (int i = 0; i < 30; ++i) {
      const auto r = tr.step(t.data);
      EXPECT_EQ(r.loss.rpn_score, 0.0);
      EXPECT_EQ(r.loss.rpn_box, 0.0);
      EXPECT_NEAR(r.loss.total, r.loss.caption, 1e-12);
      (i == 0 ? first : last) = r.loss.caption;
    }
    EXPECT_LT(last, first);
  }
}

TEST(Trainer, FinetuneDelayAndFreezeList) {
  const Toy t = toy_data(2, 8);
  DenseCapModel<double> m(small_config(t.vocab), 8);
  TrainConfig c;
  c.finetune_after = 3;
  c.freeze = {"rpn.conv"};
  const auto before = m.params();
  Trainer<double> tr(m, c, 2);
  for (int i = 0; i < 3; ++i) tr.step(t.data);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool fixed = before[i].name.rfind("backbone.", 0) == 0 || before[i].name.rfind("rpn.conv", 0) == 0;
    if (fixed) {
      EXPECT_EQ(m.params()[i].value, before[i].value) << before[i].name;
    }
  }
  tr.step(t.data);
  EXPECT_NE(m.params()[m.layout().conv_w[0]].value, before[m.layout().conv_w[0]].value);
  EXPECT_EQ(m.params()[m.layout().rpn_conv_w].value, before[m.layout().rpn_conv_w].value);
}

TEST(Trainer, NonFiniteLossNamesTheTerm) {
  const Toy t = toy_data(1, 9);
  DenseCapModel<double> m(small_config(t.vocab), 9);
  m.params()[m.layout().out_b].value[0] = std::numeric_limits<double>::quiet_NaN();
  Trainer<double> tr(m, TrainConfig{}, 1);
  try {
    tr.step(t.data);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("caption"), std::string::npos) << e.what();
  }
}

TEST(Trainer, EpochOrderIsAPermutation) {
  const Toy t = toy_data(1, 10);
  DenseCapModel<double> m(small_config(t.vocab), 10);
  Trainer<double> tr(m, TrainConfig{}, 3);
  for (std::size_t e = 0; e < 3; ++e) {
    std::vector<bool> seen(7, false);
    for (std::size_t i = 0; i < 7; ++i) seen[tr.image_for(e * 7 + i, 7)] = true;
    for (bool s : seen) EXPECT_TRUE(s);
  }
}

TEST(Trainer, ResumeThroughCheckpointIsBitIdentical) {
  const Toy t = toy_data(3, 11);
  ModelConfig mc = small_config(t.vocab);
  mc.dropout = 0.3;
  TrainConfig c;
  c.finetune_after = 2;
  const fs::path dir = fs::temp_directory_path() / "densecap_test_resume";
  fs::create_directories(dir);
  const std::string path = (dir / "ck.bin").string();

  DenseCapModel<double> straight(mc, 12);
  Trainer<double> ts(straight, c, 5);
  for (int i = 0; i < 6; ++i) ts.step(t.data);

  DenseCapModel<double> first(mc, 12);
  Trainer<double> tf(first, c, 5);
  for (int i = 0; i < 4; ++i) tf.step(t.data);
  save_checkpoint(path, first, t.vocab, tf.iteration(), run_config_to_json(RunConfig{}), &tf.state());

  auto ck = load_checkpoint<double>(path);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.iteration, 4u);
  Trainer<double> tr(ck.model, c, 5);
  tr.set_iteration(ck.iteration);
  tr.state().velocity = ck.optimizer->velocity;
  tr.state().moments = ck.optimizer->moments;
  for (int i = 0; i < 2; ++i) tr.step(t.data);

  ASSERT_EQ(ck.model.params().size(), straight.params().size());
  for (std::size_t i = 0; i < straight.params().size(); ++i)
    EXPECT_EQ(ck.model.params()[i].value, straight.params()[i].value) << straight.params()[i].name;
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripAndErrors) {
  const Toy t = toy_data(1, 13);
  const DenseCapModel<double> m(small_config(t.vocab), 13);
  const fs::path dir = fs::temp_directory_path() / "densecap_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string path = (dir / "m.bin").string();
  RunConfig rc;
  rc.seed = 77;
  save_checkpoint(path, m, t.vocab, 9, run_config_to_json(rc));
  const auto ck = load_checkpoint<double>(path);
  EXPECT_EQ(ck.iteration, 9u);
  EXPECT_EQ(run_config_from_json(ck.run_config).seed, 77u);
  EXPECT_EQ(ck.vocab.words(), t.vocab.words());
  EXPECT_FALSE(ck.optimizer.has_value());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(ck.model.params()[i].name, m.params()[i].name);
    EXPECT_EQ(ck.model.params()[i].value, m.params()[i].value);
  }
  EXPECT_THROW(load_checkpoint<float>(path), ConfigError);
  EXPECT_NO_THROW(check_model_config(ck.model.config(), m.config(), path));
  ModelConfig other = m.config();
  other.lm_hidden = 9;
  EXPECT_THROW(check_model_config(ck.model.config(), other, path), ConfigError);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint<double>((dir / "trunc.bin").string()), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.bin", std::ios::binary) << bad;
  EXPECT_THROW(load_checkpoint<double>((dir / "magic.bin").string()), DataError);
  EXPECT_THROW(load_checkpoint<double>((dir / "absent.bin").string()), DataError);
}

TEST(MetricsLog, RoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "densecap_test_metrics";
  fs::create_directories(dir);
  const std::string path = (dir / "m.tsv").string();
  {
    MetricsLog log(path, false);
    StepReport r;
    r.iteration = 3;
    r.loss = {0.5, 0.25, 0.125, 1, 2, 3};
    r.grad_norm = 1.5;
    log.write(r, 0.25);
  }
  {
    MetricsLog log(path, true);
    StepReport r;
    r.iteration = 4;
    log.write(r, 1);
  }
  const auto rows = read_metrics(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].iteration, 3u);
  EXPECT_EQ(rows[0].loss.caption, 2.0);
  EXPECT_EQ(rows[0].loss.total, 3.0);
  EXPECT_EQ(rows[0].grad_norm, 1.5);
  EXPECT_EQ(rows[1].iteration, 4u);
}

}  // namespace
}  // namespace densecap
