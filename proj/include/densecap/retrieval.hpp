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

// Caption-driven image retrieval and open-world detection on top of a
// trained model. Both score captions against the test-mode proposals of
// each image with the language model.

#include <algorithm>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "densecap/annotations.hpp"
#include "densecap/evaluation.hpp"
#include "densecap/model.hpp"

namespace densecap {

/// Test-mode proposals of one image with the language model primed on
/// each proposal's code.
template <typename T>
struct IndexedImage {
  std::vector<Box> boxes;  // refined, clipped to the image
  PrimedState<T> state;
};

template <typename T>
IndexedImage<T> index_image(const DenseCapModel<T>& model, const Tensor<T>& image, std::size_t proposals,
                            double rpn_nms = 0.7) {
  ProposalSet<T> ps = model.propose(image, proposals, rpn_nms);
  IndexedImage<T> out;
  const double W = double(image.shape()[2]), H = double(image.shape()[1]);
  for (const Box& b : ps.refined) out.boxes.push_back(b.clipped(W, H));
  Tape<T> tape;
  out.state = prime_state(model.bind_lm(tape), tape.constant(ps.codes));
  return out;
}

/// Per-proposal log-probability of `caption` in one indexed image.
template <typename T>
std::vector<double> score_caption(const DenseCapModel<T>& model, const IndexedImage<T>& img,
                                  const std::vector<int>& caption) {
  Tape<T> tape;
  return continuation_logprob(model.bind_lm(tape), img.state, caption);
}

/// Encodes a free-text caption; throws DataError when no token is in the
/// vocabulary.
inline std::vector<int> encode_query(const Vocabulary& vocab, const std::string& text) {
  auto toks = vocab.encode(text);
  const bool any = std::any_of(toks.begin(), toks.end(), [](int t) { return t != Vocabulary::kUnk; });
  if (!any) throw DataError("query '" + text + "' has no in-vocabulary token");
  return toks;
}

struct RetrievalQuery {
  std::size_t source = 0;  // index into the pool
  std::vector<std::string> captions;
  std::vector<Box> boxes;  // ground-truth box of each caption
};

/// n_queries distinct source images, each with `per_query` captions drawn
/// without replacement while the image has enough regions, then with
/// replacement.
inline std::vector<RetrievalQuery> make_queries(const std::vector<ImageRecord>& pool,
                                                std::size_t n_queries, std::size_t per_query,
                                                std::mt19937_64& rng) {
  if (n_queries > pool.size())
    throw DataError("retrieval: " + std::to_string(n_queries) + " queries need at least that many images, pool has " +
                    std::to_string(pool.size()));
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng);
  std::vector<RetrievalQuery> out;
  for (std::size_t q = 0; q < n_queries; ++q) {
    RetrievalQuery rq;
    rq.source = order[q];
    const auto& regs = pool[rq.source].regions;
    if (regs.empty()) throw DataError("retrieval: image " + pool[rq.source].id + " has no regions");
    std::vector<std::size_t> idx(regs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t c = 0; c < per_query; ++c) {
      const std::size_t r = c < idx.size() ? idx[c] : uniform_index(rng, regs.size());
      rq.captions.push_back(regs[r].caption);
      rq.boxes.push_back(regs[r].box);
    }
    out.push_back(std::move(rq));
  }
  return out;
}

struct QueryOutcome {
  std::size_t rank = 0;
  std::vector<double> image_scores;
  std::vector<Box> grounding;  // aligned proposal in the source image, per caption
  std::vector<double> ious;
};

struct RetrievalResult {
  RetrievalMetrics metrics;
  std::vector<QueryOutcome> queries;
};

/// Every caption of a query is aligned to its best proposal in each image;
/// the image score is the mean aligned log-probability.
template <typename T>
RetrievalResult retrieval_eval(const DenseCapModel<T>& model, const std::vector<IndexedImage<T>>& pool,
                               const std::vector<RetrievalQuery>& queries, const Vocabulary& vocab) {
  RetrievalResult res;
  std::vector<std::size_t> ranks;
  std::vector<std::vector<double>> ious;
  for (const auto& q : queries) {
    require(q.source < pool.size(), "retrieval: source image outside the pool");
    QueryOutcome out;
    out.image_scores.assign(pool.size(), 0.0);
    std::vector<std::vector<int>> caps;
    for (const auto& c : q.captions) caps.push_back(encode_query(vocab, c));
    for (std::size_t im = 0; im < pool.size(); ++im) {
      for (std::size_t c = 0; c < caps.size(); ++c) {
        const auto lp = score_caption(model, pool[im], caps[c]);
        const std::size_t best = std::size_t(std::max_element(lp.begin(), lp.end()) - lp.begin());
        out.image_scores[im] += lp[best] / double(caps.size());
        if (im == q.source) {
          out.grounding.push_back(pool[im].boxes[best]);
          out.ious.push_back(iou(pool[im].boxes[best], q.boxes[c]));
        }
      }
    }
    out.rank = rank_of(out.image_scores, q.source);
    ranks.push_back(out.rank);
    ious.push_back(out.ious);
    res.queries.push_back(std::move(out));
  }
  res.metrics = summarize_retrieval(ranks, ious, pool.size());
  return res;
}

struct WorldDetection {
  std::size_t image = 0;
  Box box;
  double score = 0;  // log-probability per scored token
};

/// Scores every proposal of every image by the length-normalized
/// log-probability of the query and returns the global top_n, best first.
template <typename T>
std::vector<WorldDetection> open_world_detect(const DenseCapModel<T>& model,
                                              const std::vector<IndexedImage<T>>& pool,
                                              const std::vector<int>& query, std::size_t top_n) {
  std::vector<WorldDetection> all;
  if (top_n == 0) return all;
  for (std::size_t im = 0; im < pool.size(); ++im) {
    const auto lp = score_caption(model, pool[im], query);
    for (std::size_t p = 0; p < lp.size(); ++p)
      all.push_back({im, pool[im].boxes[p], lp[p] / double(query.size() + 1)});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const WorldDetection& a, const WorldDetection& b) { return a.score > b.score; });
  if (all.size() > top_n) all.resize(top_n);
  return all;
}

}  // namespace densecap
