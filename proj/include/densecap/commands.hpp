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

// The operations behind the command-line verbs. Each writes its outputs and
// the resolved config (config.json) into one directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "densecap/annotations.hpp"
#include "densecap/checkpoint.hpp"
#include "densecap/config.hpp"
#include "densecap/data_synth.hpp"
#include "densecap/evaluation.hpp"
#include "densecap/image.hpp"
#include "densecap/model.hpp"
#include "densecap/retrieval.hpp"
#include "densecap/training.hpp"

namespace densecap {

/// Calls f.template operator()<T>() with T = float or double.
template <typename F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
  if (precision == "double") return f.template operator()<double>();
  if (precision == "float") return f.template operator()<float>();
  throw ConfigError("unknown precision '" + precision + "'");
}

namespace detail {

inline std::filesystem::path prepare_output(const std::string& dir, const RunConfig& c) {
  namespace fs = std::filesystem;
  if (dir.empty()) throw ConfigError("output directory not set");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir);
  save_run_config(c, (fs::path(dir) / "config.json").string());
  return fs::path(dir);
}

inline void write_json(const std::filesystem::path& p, const Json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline void need(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string(what) + " is required");
}

inline Rgb region_color(std::size_t k) {
  static const Rgb colors[] = {{230, 25, 75},  {60, 180, 75},  {0, 130, 200}, {245, 130, 48},
                               {145, 30, 180}, {70, 240, 240}, {240, 50, 230}, {128, 128, 0}};
  return colors[k % 8];
}

template <typename T>
Checkpoint<T> open_checkpoint(const std::string& path, const RunConfig& c) {
  need(path, "checkpoint");
  Checkpoint<T> ck = load_checkpoint<T>(path);
  check_model_config(ck.model.config(), c.model, path);
  return ck;
}

inline std::vector<const ImageRecord*> split_records(const Dataset& ds, const std::string& split) {
  auto recs = ds.split(split);
  if (recs.empty()) throw DataError("split '" + split + "' of " + ds.root + " has no images");
  return recs;
}

}  // namespace detail

/// Upscaled copy of `img` with numbered boxes and a caption legend below.
inline Image annotate(const Image& img, const std::vector<CaptionedRegion>& regions, int scale) {
  const int line = kGlyphHeight + 4;
  std::size_t longest = 0;
  std::vector<std::string> legend;
  char buf[64];
  for (std::size_t k = 0; k < regions.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu %.2f ", k + 1, regions[k].confidence);
    legend.push_back(buf + regions[k].caption);
    longest = std::max(longest, legend.back().size());
  }
  const int W = std::max(img.width * scale, int(longest) * kGlyphAdvance + 8);
  Image out(W, img.height * scale + 4 + line * int(regions.size()), {255, 255, 255});
  blit(out, upscale(img, scale), 0, 0);
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const auto c = regions[k].box.corners();
    const Rgb col = detail::region_color(k);
    const int x0 = int(c[0] * scale), y0 = int(c[1] * scale);
    draw_rect(out, x0, y0, int(c[2] * scale) - 1, int(c[3] * scale) - 1, col, 2);
    const std::string tag = std::to_string(k + 1);
    fill_rect(out, x0, y0, x0 + kGlyphAdvance * int(tag.size()) + 3, y0 + kGlyphHeight + 3, col);
    draw_text(out, x0 + 2, y0 + 2, tag, {255, 255, 255});
    const int ly = img.height * scale + 4 + line * int(k);
    fill_rect(out, 2, ly, 6, ly + kGlyphHeight, col);
    draw_text(out, 10, ly, legend[k], {0, 0, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// gen-data

inline Json cmd_gen_data(const RunConfig& c, std::ostream& log) {
  const auto dir = detail::prepare_output(c.data.root, c);
  Dataset ds = generate_dataset(dir.string(), c.data.dataset, c.seed);
  const Json& st = ds.manifest["stats"];
  log << "wrote " << st["images"].get<std::size_t>() << " images (" << ds.split("train").size()
      << " train, " << ds.split("val").size() << " val, " << ds.split("test").size() << " test), "
      << st["regions"].get<std::size_t>() << " regions, " << ds.vocab.num_words()
      << " vocabulary words to " << dir.string() << "\n";
  return ds.manifest;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::string checkpoint;
  std::size_t start_iteration = 0, end_iteration = 0;
  double initial_loss_estimate = 0;
  double first_loss = 0;  // first logged total of the whole run
  double final_loss = 0;  // mean total over the last 100 logged iterations
};

inline Json summary_to_json(const TrainSummary& s) {
  return Json{{"checkpoint", s.checkpoint},
              {"start_iteration", s.start_iteration},
              {"end_iteration", s.end_iteration},
              {"initial_loss_estimate", s.initial_loss_estimate},
              {"first_loss", s.first_loss},
              {"final_loss", s.final_loss}};
}

template <typename T>
std::vector<TrainingSample<T>> training_samples(const Dataset& ds, const std::string& split) {
  std::vector<TrainingSample<T>> out;
  for (const ImageRecord* r : detail::split_records(ds, split)) {
    if (r->regions.empty()) throw DataError("training image " + r->id + " has no regions");
    out.push_back(make_sample<T>(ds.load_image(*r), *r, ds.vocab));
  }
  return out;
}

template <typename T>
TrainSummary train_run(const RunConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  detail::need(c.train.data, "train.data");
  const TrainConfig& tc = c.train.train;
  const Dataset ds = load_dataset(c.train.data);
  const auto samples = training_samples<T>(ds, "train");

  ModelConfig mc = c.model;
  mc.vocab_classes = ds.vocab.output_size();
  DenseCapModel<T> model(mc, c.seed);
  std::optional<OptimizerState<T>> restored;
  std::size_t start = 0;
  if (!c.train.resume.empty()) {
    Checkpoint<T> ck = detail::open_checkpoint<T>(c.train.resume, c);
    if (ck.vocab.words() != ds.vocab.words())
      throw DataError(c.train.resume + ": vocabulary differs from dataset " + c.train.data);
    model = std::move(ck.model);
    restored = std::move(ck.optimizer);
    start = ck.iteration;
  }
  const auto dir = detail::prepare_output(c.train.out, c);
  const Json echo = run_config_to_json(c);

  Trainer<T> trainer(model, tc, c.seed);
  trainer.set_iteration(start);
  if (restored) {
    trainer.state().velocity = std::move(restored->velocity);
    trainer.state().moments = std::move(restored->moments);
  }

  TrainSummary sum;
  sum.start_iteration = start;
  sum.initial_loss_estimate = estimate_initial_loss(samples, mc, tc);
  log << "training " << samples.size() << " images, iterations " << start << ".." << tc.iterations
      << ", estimated initial loss " << sum.initial_loss_estimate << "\n";

  const std::string metrics_path = (dir / "metrics.tsv").string();
  auto render_curve = [&] {
    const auto rows = read_metrics(metrics_path);
    if (!rows.empty()) write_ppm((dir / "loss_curve.ppm").string(), render_loss_curve(rows));
  };
  {
    MetricsLog metrics(metrics_path, start > 0);
    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.iteration() < tc.iterations) {
      const StepReport rep = trainer.step(samples);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const bool last = trainer.iteration() == tc.iterations;
      if (rep.iteration % tc.log_every == 0 || last) metrics.write(rep, wall);
      if (rep.iteration % 100 == 0 || last) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "iter %6zu  loss %.4f  caption %.4f  grad %.3f  %.1fs\n",
                      rep.iteration, rep.loss.total, rep.loss.caption, rep.grad_norm, wall);
        log << buf << std::flush;
      }
      if (tc.checkpoint_every > 0 && trainer.iteration() % tc.checkpoint_every == 0 && !last) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_%06zu.bin", trainer.iteration());
        save_checkpoint((dir / name).string(), model, ds.vocab, trainer.iteration(), echo,
                        &trainer.state());
        render_curve();
      }
    }
  }
  sum.end_iteration = trainer.iteration();
  sum.checkpoint = (dir / "model.bin").string();
  save_checkpoint(sum.checkpoint, model, ds.vocab, trainer.iteration(), echo, &trainer.state());
  render_curve();

  const auto rows = read_metrics(metrics_path);
  if (!rows.empty()) {
    sum.first_loss = rows.front().loss.total;
    const std::size_t n = std::min<std::size_t>(100, rows.size());
    for (std::size_t i = rows.size() - n; i < rows.size(); ++i) sum.final_loss += rows[i].loss.total;
    sum.final_loss /= double(n);
  }
  detail::write_json(dir / "summary.json", summary_to_json(sum));
  log << "final loss " << sum.final_loss << " (mean of last 100 logged), checkpoint "
      << sum.checkpoint << "\n";
  return sum;
}

inline TrainSummary cmd_train(const RunConfig& c, std::ostream& log) {
  return with_precision(c.precision, [&]<typename T>() { return train_run<T>(c, log); });
}

// ---------------------------------------------------------------------------
// describe

template <typename T>
std::vector<CaptionedRegion> describe_regions(const DenseCapModel<T>& model, const Vocabulary& vocab,
                                              const Image& img, const InferenceOptions& opts) {
  std::vector<CaptionedRegion> out;
  for (const Detection& d : model.describe(image_to_tensor<T>(img), opts))
    out.push_back({d.box, vocab.decode(d.tokens), d.score});
  return out;
}

template <typename T>
std::vector<ImageRecord> describe_run(const RunConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  const DescribeSection& s = c.describe;
  if (s.image.empty() == s.data.empty())
    throw ConfigError("describe needs exactly one of an image or a dataset");
  const Checkpoint<T> ck = detail::open_checkpoint<T>(s.checkpoint, c);
  const auto dir = detail::prepare_output(s.out, c);

  std::vector<ImageRecord> preds;
  std::vector<Image> images;
  if (!s.image.empty()) {
    ImageRecord r;
    r.id = fs::path(s.image).stem().string();
    r.image = s.image;
    images.push_back(read_ppm(s.image));
    preds.push_back(std::move(r));
  } else {
    const Dataset ds = load_dataset(s.data);
    if (ds.vocab.words() != ck.vocab.words())
      throw DataError(s.data + ": vocabulary differs from checkpoint " + s.checkpoint);
    for (const ImageRecord* src : detail::split_records(ds, s.split)) {
      ImageRecord r;
      r.id = src->id;
      r.image = src->image;
      r.split = src->split;
      images.push_back(ds.load_image(*src));
      preds.push_back(std::move(r));
    }
  }
  fs::create_directories(dir / "annotated");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    preds[i].width = images[i].width;
    preds[i].height = images[i].height;
    preds[i].regions = describe_regions(ck.model, ck.vocab, images[i], s.inference);
    if (i < s.render_limit)
      write_ppm((dir / "annotated" / (preds[i].id + ".ppm")).string(),
                annotate(images[i], preds[i].regions, int(s.render_scale)));
  }
  write_records((dir / "predictions.jsonl").string(), preds, true);
  std::size_t n = 0;
  for (const auto& p : preds) n += p.regions.size();
  log << "described " << preds.size() << " image(s), " << n << " regions, wrote "
      << (dir / "predictions.jsonl").string() << "\n";
  return preds;
}

inline std::vector<ImageRecord> cmd_describe(const RunConfig& c, std::ostream& log) {
  return with_precision(c.precision, [&]<typename T>() { return describe_run<T>(c, log); });
}

// ---------------------------------------------------------------------------
// evaluate

inline EvalReport cmd_evaluate(const RunConfig& c, std::ostream& log) {
  const EvaluateSection& s = c.evaluate;
  detail::need(s.predictions, "evaluate.predictions");
  detail::need(s.ground_truth, "evaluate.ground_truth");
  const auto preds = read_records(s.predictions, true);
  auto gts = read_records(s.ground_truth, false);
  if (!s.split.empty())
    std::erase_if(gts, [&](const ImageRecord& r) { return r.split != s.split; });
  if (gts.empty()) throw DataError(s.ground_truth + ": no ground-truth images to evaluate");
  const auto dir = detail::prepare_output(s.out, c);
  const EvalReport rep = dense_cap_ap(pair_records(preds, gts, s.merge_iou));
  detail::write_json(dir / "report.json", report_to_json(rep));
  const std::string table = report_table(rep);
  std::ofstream(dir / "report.txt") << table;
  log << table;
  return rep;
}

// ---------------------------------------------------------------------------
// retrieve

template <typename T>
std::vector<IndexedImage<T>> index_images(const DenseCapModel<T>& model, const Dataset& ds,
                                          const std::vector<const ImageRecord*>& recs,
                                          std::size_t proposals, double rpn_nms) {
  std::vector<IndexedImage<T>> out;
  for (const ImageRecord* r : recs)
    out.push_back(index_image(model, image_to_tensor<T>(ds.load_image(*r)), proposals, rpn_nms));
  return out;
}

template <typename T>
Json retrieve_run(const RunConfig& c, std::ostream& log) {
  const RetrieveSection& s = c.retrieve;
  detail::need(s.data, "retrieve.data");
  const Checkpoint<T> ck = detail::open_checkpoint<T>(s.checkpoint, c);
  const Dataset ds = load_dataset(s.data);
  if (ds.vocab.words() != ck.vocab.words())
    throw DataError(s.data + ": vocabulary differs from checkpoint " + s.checkpoint);
  auto recs = ds.split(s.split);
  if (recs.size() > s.pool) recs.resize(s.pool);
  std::vector<ImageRecord> pool;
  for (const ImageRecord* r : recs) pool.push_back(*r);
  std::mt19937_64 rng(splitmix64(c.seed));
  const auto queries = make_queries(pool, s.queries, s.captions_per_query, rng);
  const auto dir = detail::prepare_output(s.out, c);

  const auto indexed = index_images(ck.model, ds, recs, s.proposals, s.rpn_nms);
  const RetrievalResult res = retrieval_eval(ck.model, indexed, queries, ck.vocab);

  Json report = retrieval_to_json(res.metrics);
  Json qs = Json::array();
  for (std::size_t q = 0; q < queries.size(); ++q) {
    Json jq;
    jq["source"] = pool[queries[q].source].id;
    jq["captions"] = queries[q].captions;
    jq["rank"] = res.queries[q].rank;
    Json ground = Json::array();
    for (std::size_t k = 0; k < res.queries[q].grounding.size(); ++k) {
      const auto b = res.queries[q].grounding[k].corners();
      ground.push_back({{"box", {b[0], b[1], b[2], b[3]}}, {"iou", res.queries[q].ious[k]}});
    }
    jq["grounding"] = std::move(ground);
    qs.push_back(std::move(jq));
  }
  report["queries"] = std::move(qs);
  detail::write_json(dir / "retrieval.json", report);
  char buf[256];
  const auto& m = res.metrics;
  std::snprintf(buf, sizeof buf,
                "queries %zu  pool %zu  R@1 %.3f  R@5 %.3f  R@10 %.3f  median rank %.1f\n"
                "grounding IoU>0.1 %.3f  >0.3 %.3f  >0.5 %.3f  median IoU %.3f (retrieved %.3f)\n",
                m.num_queries, m.pool_size, m.recall_at_1, m.recall_at_5, m.recall_at_10,
                m.median_rank, m.iou_recall[0], m.iou_recall[1], m.iou_recall[2], m.median_iou,
                m.median_iou_retrieved);
  log << buf;
  return report;
}

inline Json cmd_retrieve(const RunConfig& c, std::ostream& log) {
  return with_precision(c.precision, [&]<typename T>() { return retrieve_run<T>(c, log); });
}

// ---------------------------------------------------------------------------
// detect

template <typename T>
Json detect_run(const RunConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  const DetectSection& s = c.detect;
  detail::need(s.data, "detect.data");
  detail::need(s.query, "detect.query");
  const Checkpoint<T> ck = detail::open_checkpoint<T>(s.checkpoint, c);
  const Dataset ds = load_dataset(s.data);
  if (ds.vocab.words() != ck.vocab.words())
    throw DataError(s.data + ": vocabulary differs from checkpoint " + s.checkpoint);
  const auto query = encode_query(ck.vocab, s.query);
  const auto recs = detail::split_records(ds, s.split);
  const auto dir = detail::prepare_output(s.out, c);

  std::vector<WorldDetection> dets;
  if (s.top_n > 0)
    dets = open_world_detect(ck.model, index_images(ck.model, ds, recs, s.proposals, s.rpn_nms),
                             query, s.top_n);

  Json report;
  report["query"] = s.query;
  report["tokens"] = ck.vocab.decode(query);
  Json list = Json::array();
  if (!dets.empty()) fs::create_directories(dir / "crops");
  const int scale = int(s.crop_scale);
  std::vector<Image> tiles;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    const ImageRecord& r = *recs[dets[k].image];
    const auto b = dets[k].box.corners();
    list.push_back({{"rank", k + 1}, {"image", r.id}, {"box", {b[0], b[1], b[2], b[3]}},
                    {"score", dets[k].score}});
    const Image img = ds.load_image(r);
    const Image cr = crop(img, int(std::floor(b[0])), int(std::floor(b[1])), int(std::ceil(b[2])),
                          int(std::ceil(b[3])));
    char name[64];
    std::snprintf(name, sizeof name, "%02zu_%s.ppm", k + 1, r.id.c_str());
    write_ppm((dir / "crops" / name).string(), upscale(cr, scale));
    Image tile = upscale(img, scale);
    draw_rect(tile, int(b[0] * scale), int(b[1] * scale), int(b[2] * scale) - 1,
              int(b[3] * scale) - 1, {255, 255, 0}, 2);
    tiles.push_back(std::move(tile));
  }
  report["detections"] = std::move(list);
  detail::write_json(dir / "detections.json", report);

  if (!tiles.empty()) {
    const int cols = int(std::min<std::size_t>(5, tiles.size()));
    const int rows = int((tiles.size() + std::size_t(cols) - 1) / std::size_t(cols));
    const int tw = tiles[0].width, th = tiles[0].height + kGlyphHeight + 6;
    Image panel(cols * (tw + 4) + 4, rows * (th + 4) + 4, {255, 255, 255});
    for (std::size_t k = 0; k < tiles.size(); ++k) {
      const int x = 4 + int(k % std::size_t(cols)) * (tw + 4), y = 4 + int(k / std::size_t(cols)) * (th + 4);
      blit(panel, tiles[k], x, y);
      char label[64];
      std::snprintf(label, sizeof label, "%zu: %.3f", k + 1, dets[k].score);
      draw_text(panel, x, y + tiles[k].height + 3, label, {0, 0, 0});
    }
    write_ppm((dir / "panel.ppm").string(), panel);
  }
  log << "query '" << s.query << "': " << dets.size() << " detections over " << recs.size()
      << " images\n";
  for (std::size_t k = 0; k < dets.size(); ++k) {
    const auto b = dets[k].box.corners();
    char buf[160];
    std::snprintf(buf, sizeof buf, "%3zu  %s  [%.1f %.1f %.1f %.1f]  %.4f\n", k + 1,
                  recs[dets[k].image]->id.c_str(), b[0], b[1], b[2], b[3], dets[k].score);
    log << buf;
  }
  return report;
}

inline Json cmd_detect(const RunConfig& c, std::ostream& log) {
  return with_precision(c.precision, [&]<typename T>() { return detect_run<T>(c, log); });
}

}  // namespace densecap
