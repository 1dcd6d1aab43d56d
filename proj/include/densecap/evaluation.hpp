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
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "densecap/annotations.hpp"
#include "densecap/geometry.hpp"
#include "densecap/vocabulary.hpp"

namespace densecap {

// ---------------------------------------------------------------------------
// Language score

namespace detail {

struct Alignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Exhaustive search over unigram alignments of exact matches: maximal
/// match count first, then fewest chunks.
inline Alignment best_alignment(const std::vector<std::string>& cand,
                                const std::vector<std::string>& ref) {
  std::vector<int> target(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  // Upper bound on further matches from position i on, for pruning.
  std::vector<std::size_t> can(cand.size() + 1, 0);
  for (std::size_t i = cand.size(); i-- > 0;)
    can[i] = can[i + 1] + (std::find(ref.begin(), ref.end(), cand[i]) != ref.end());
  Alignment best;
  bool have = false;
  std::function<void(std::size_t, std::size_t, std::size_t, int, int)> dfs =
      [&](std::size_t i, std::size_t m, std::size_t ch, int prev_c, int prev_r) {
        if (have && m + can[i] < best.matches) return;
        if (i == cand.size()) {
          if (!have || m > best.matches || (m == best.matches && ch < best.chunks))
            best = {m, ch}, have = true;
          return;
        }
        for (std::size_t j = 0; j < ref.size(); ++j) {
          if (used[j] || ref[j] != cand[i]) continue;
          const bool extends = prev_c == int(i) - 1 && prev_r == int(j) - 1 && prev_c >= 0;
          used[j] = true;
          dfs(i + 1, m + 1, ch + (extends ? 0 : 1), int(i), int(j));
          used[j] = false;
        }
        dfs(i + 1, m, ch, prev_c, prev_r);
      };
  dfs(0, 0, 0, -1, -1);
  return best;
}

}  // namespace detail

/// Exact-match METEOR core against one reference.
inline double meteor_single(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto a = detail::best_alignment(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = double(a.matches);
  const double P = m / double(cand.size()), R = m / double(ref.size());
  const double F = P * R / (0.9 * P + 0.1 * R);
  const double frag = double(a.chunks) / m;
  return F * (1.0 - 0.5 * frag * frag * frag);
}

/// Maximum over references of the single-reference score.
inline double meteor_lite(const std::vector<std::string>& cand,
                          const std::vector<std::vector<std::string>>& refs) {
  require(!refs.empty(), "meteor_lite: empty reference list");
  double best = 0.0;
  for (const auto& r : refs) best = std::max(best, meteor_single(cand, r));
  return best;
}

inline double meteor_lite(const std::string& cand, const std::vector<std::string>& refs) {
  std::vector<std::vector<std::string>> toks;
  for (const auto& r : refs) toks.push_back(tokenize(r));
  return meteor_lite(tokenize(cand), toks);
}

// ---------------------------------------------------------------------------
// Reference merging

struct MergedGroundTruth {
  Box box;
  std::vector<std::string> references;
  std::vector<std::size_t> members;  // indices into the input regions
};

/// Repeatedly takes the remaining box with the most partners at IoU >=
/// thresh (ties: lowest index), replaces it and its partners by their mean
/// box and pools their captions.
inline std::vector<MergedGroundTruth> merge_references(const std::vector<CaptionedRegion>& gts,
                                                       double thresh = 0.7) {
  std::vector<MergedGroundTruth> out;
  std::vector<bool> alive(gts.size(), true);
  std::size_t left = gts.size();
  while (left > 0) {
    std::size_t best = gts.size(), best_n = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (!alive[i]) continue;
      std::size_t n = 0;
      for (std::size_t j = 0; j < gts.size(); ++j)
        n += j != i && alive[j] && iou(gts[i].box, gts[j].box) >= thresh;
      if (best == gts.size() || n > best_n) best = i, best_n = n;
    }
    MergedGroundTruth g;
    for (std::size_t j = 0; j < gts.size(); ++j)
      if (alive[j] && (j == best || iou(gts[best].box, gts[j].box) >= thresh)) g.members.push_back(j);
    std::array<double, 4> acc{};
    for (std::size_t j : g.members) {
      const auto c = gts[j].box.corners();
      for (int k = 0; k < 4; ++k) acc[k] += c[k];
      g.references.push_back(gts[j].caption);
      alive[j] = false;
      --left;
    }
    const double n = double(g.members.size());
    g.box = Box::from_corners(acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n);
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense captioning average precision

inline constexpr std::array<double, 5> kIouThresholds{0.3, 0.4, 0.5, 0.6, 0.7};
inline constexpr std::array<double, 6> kLanguageThresholds{0.0, 0.05, 0.1, 0.15, 0.2, 0.25};

struct EvalReport {
  std::array<std::array<double, 6>, 5> ap{};  // [iou][language]
  double mean_ap = 0;
  double language_score = 0;
  std::size_t num_predictions = 0;
  std::size_t num_ground_truth = 0;
};

/// Area under the precision/recall curve with all-points interpolation:
/// sum over recall steps of the maximum precision at that recall or beyond.
inline double average_precision(const std::vector<bool>& tp_in_order, std::size_t npos) {
  if (npos == 0 || tp_in_order.empty()) return 0.0;
  const std::size_t n = tp_in_order.size();
  std::vector<double> prec(n), rec(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_in_order[i];
    prec[i] = double(tp) / double(i + 1);
    rec[i] = double(tp) / double(npos);
  }
  for (std::size_t i = n - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

/// One image: its predictions and merged ground truth.
struct EvalImage {
  std::vector<CaptionedRegion> predictions;
  std::vector<MergedGroundTruth> ground_truth;
};

/// Dense-captioning AP pooled over images. For each threshold pair,
/// predictions are visited in descending confidence (stable in input
/// order); a prediction is a true positive when some unmatched ground truth
/// of its image has IoU >= t_iou and language score >= t_lang, and it takes
/// the qualifying ground truth of highest IoU (ties: lowest index).
inline EvalReport dense_cap_ap(const std::vector<EvalImage>& images) {
  EvalReport rep;
  struct Pred {
    std::size_t image, index;
    double conf;
  };
  std::vector<Pred> order;
  // Per prediction, IoU and language score against each ground truth.
  std::vector<std::vector<std::vector<std::pair<double, double>>>> sc(images.size());
  for (std::size_t im = 0; im < images.size(); ++im) {
    const auto& e = images[im];
    rep.num_ground_truth += e.ground_truth.size();
    rep.num_predictions += e.predictions.size();
    std::vector<std::vector<std::vector<std::string>>> refs;
    for (const auto& g : e.ground_truth) {
      refs.emplace_back();
      for (const auto& r : g.references) refs.back().push_back(tokenize(r));
    }
    for (std::size_t p = 0; p < e.predictions.size(); ++p) {
      const auto& pr = e.predictions[p];
      order.push_back({im, p, pr.confidence});
      const auto ct = tokenize(pr.caption);
      std::vector<std::pair<double, double>> row;
      for (std::size_t g = 0; g < e.ground_truth.size(); ++g)
        row.emplace_back(iou(pr.box, e.ground_truth[g].box), meteor_lite(ct, refs[g]));
      sc[im].push_back(std::move(row));
    }
  }
  if (rep.num_ground_truth == 0) throw DataError("dense_cap_ap: no ground truth regions");
  std::stable_sort(order.begin(), order.end(),
                   [](const Pred& a, const Pred& b) { return a.conf > b.conf; });

  double sum = 0;
  for (std::size_t a = 0; a < kIouThresholds.size(); ++a)
    for (std::size_t b = 0; b < kLanguageThresholds.size(); ++b) {
      std::vector<std::vector<bool>> taken(images.size());
      for (std::size_t im = 0; im < images.size(); ++im)
        taken[im].assign(images[im].ground_truth.size(), false);
      std::vector<bool> tp;
      tp.reserve(order.size());
      for (const Pred& p : order) {
        const auto& row = sc[p.image][p.index];
        std::size_t best = row.size();
        for (std::size_t g = 0; g < row.size(); ++g) {
          if (taken[p.image][g] || row[g].first < kIouThresholds[a] ||
              row[g].second < kLanguageThresholds[b])
            continue;
          if (best == row.size() || row[g].first > row[best].first) best = g;
        }
        if (best < row.size()) taken[p.image][best] = true;
        tp.push_back(best < row.size());
      }
      rep.ap[a][b] = average_precision(tp, rep.num_ground_truth);
      sum += rep.ap[a][b];
    }
  rep.mean_ap = sum / double(kIouThresholds.size() * kLanguageThresholds.size());

  double lang = 0;
  std::size_t n = 0;
  for (const auto& e : images) {
    if (e.predictions.empty()) continue;
    std::vector<std::string> bag;
    for (const auto& g : e.ground_truth) bag.insert(bag.end(), g.references.begin(), g.references.end());
    if (bag.empty()) continue;
    for (const auto& p : e.predictions) lang += meteor_lite(p.caption, bag), ++n;
  }
  rep.language_score = n ? lang / double(n) : 0.0;
  return rep;
}

/// Mean language score of predictions against the image's pooled
/// references, ignoring boxes.
inline double language_only_score(const std::vector<CaptionedRegion>& predictions,
                                  const std::vector<MergedGroundTruth>& gts) {
  require(!predictions.empty(), "language_only_score: no predictions");
  std::vector<std::string> bag;
  for (const auto& g : gts) bag.insert(bag.end(), g.references.begin(), g.references.end());
  if (bag.empty()) throw DataError("language_only_score: empty reference bag");
  double s = 0;
  for (const auto& p : predictions) s += meteor_lite(p.caption, bag);
  return s / double(predictions.size());
}

/// Pairs prediction and ground-truth records by id. Ground-truth images
/// without predictions contribute misses.
inline std::vector<EvalImage> pair_records(const std::vector<ImageRecord>& predictions,
                                           const std::vector<ImageRecord>& ground_truth,
                                           double merge_iou = 0.7) {
  std::vector<EvalImage> out;
  std::vector<bool> used(predictions.size(), false);
  for (const auto& g : ground_truth) {
    EvalImage e;
    e.ground_truth = merge_references(g.regions, merge_iou);
    for (std::size_t i = 0; i < predictions.size(); ++i)
      if (!used[i] && predictions[i].id == g.id) {
        used[i] = true;
        e.predictions.insert(e.predictions.end(), predictions[i].regions.begin(),
                             predictions[i].regions.end());
      }
    out.push_back(std::move(e));
  }
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (!used[i]) throw DataError("prediction for unknown image id '" + predictions[i].id + "'");
  return out;
}

inline Json report_to_json(const EvalReport& r) {
  Json j;
  j["mean_ap"] = r.mean_ap;
  j["language_score"] = r.language_score;
  j["num_predictions"] = r.num_predictions;
  j["num_ground_truth"] = r.num_ground_truth;
  j["iou_thresholds"] = kIouThresholds;
  j["language_thresholds"] = kLanguageThresholds;
  Json grid = Json::array();
  for (const auto& row : r.ap) grid.push_back(row);
  j["ap"] = std::move(grid);
  return j;
}

inline std::string report_table(const EvalReport& r) {
  std::string s = "AP        lang>=";
  char buf[160];
  for (double t : kLanguageThresholds) std::snprintf(buf, sizeof buf, "%7.2f", t), s += buf;
  s += "\n";
  for (std::size_t a = 0; a < kIouThresholds.size(); ++a) {
    std::snprintf(buf, sizeof buf, "iou>=%.1f        ", kIouThresholds[a]);
    s += buf;
    for (double v : r.ap[a]) std::snprintf(buf, sizeof buf, "%7.4f", v), s += buf;
    s += "\n";
  }
  std::snprintf(buf, sizeof buf, "mean AP %.4f   language score %.4f   predictions %zu   ground truth %zu\n",
                r.mean_ap, r.language_score, r.num_predictions, r.num_ground_truth);
  return s + buf;
}

// ---------------------------------------------------------------------------
// Retrieval

/// 1-based rank of `source` when images are sorted by descending score;
/// ties rank the lower index first.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t source) {
  std::size_t r = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > scores[source] || (scores[j] == scores[source] && j < source)) ++r;
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct RetrievalMetrics {
  double recall_at_1 = 0, recall_at_5 = 0, recall_at_10 = 0;
  double median_rank = 0;
  std::array<double, 3> iou_recall{};  // fraction of captions grounded at IoU > 0.1, 0.3, 0.5
  double median_iou = 0;
  double median_iou_retrieved = 0;  // over captions of queries ranked first
  std::size_t num_queries = 0, pool_size = 0;
};

inline constexpr std::array<double, 3> kGroundingThresholds{0.1, 0.3, 0.5};

/// ranks: per query; ious: per query, per caption grounding IoU.
inline RetrievalMetrics summarize_retrieval(const std::vector<std::size_t>& ranks,
                                            const std::vector<std::vector<double>>& ious,
                                            std::size_t pool_size) {
  require(ranks.size() == ious.size(), "summarize_retrieval: size mismatch");
  RetrievalMetrics m;
  m.num_queries = ranks.size();
  m.pool_size = pool_size;
  if (ranks.empty()) return m;
  std::vector<double> rk, all, hit;
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    m.recall_at_1 += ranks[q] <= 1;
    m.recall_at_5 += ranks[q] <= 5;
    m.recall_at_10 += ranks[q] <= 10;
    rk.push_back(double(ranks[q]));
    for (double v : ious[q]) {
      all.push_back(v);
      if (ranks[q] == 1) hit.push_back(v);
      for (std::size_t t = 0; t < kGroundingThresholds.size(); ++t)
        m.iou_recall[t] += v > kGroundingThresholds[t];
    }
  }
  const double n = double(ranks.size());
  m.recall_at_1 /= n, m.recall_at_5 /= n, m.recall_at_10 /= n;
  for (auto& r : m.iou_recall) r = all.empty() ? 0.0 : r / double(all.size());
  m.median_rank = median(rk);
  m.median_iou = median(all);
  m.median_iou_retrieved = median(hit);
  return m;
}

inline Json retrieval_to_json(const RetrievalMetrics& m) {
  return Json{{"num_queries", m.num_queries},
              {"pool_size", m.pool_size},
              {"recall_at_1", m.recall_at_1},
              {"recall_at_5", m.recall_at_5},
              {"recall_at_10", m.recall_at_10},
              {"median_rank", m.median_rank},
              {"iou_thresholds", kGroundingThresholds},
              {"iou_recall", m.iou_recall},
              {"median_iou", m.median_iou},
              {"median_iou_retrieved", m.median_iou_retrieved}};
}

}  // namespace densecap
