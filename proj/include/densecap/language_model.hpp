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

// Region-conditioned LSTM captioner. A region is described to the LSTM once,
// as the first input; then START and the caption tokens follow:
//
//   inputs   x_-1 = relu(code W_c + b_c), e(START), e(s_1), ..., e(s_T)
//   targets  (ignored),                   s_1,      s_2, ...,  END
//
// All functions operate on a batch of N regions at once.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "densecap/ops.hpp"
#include "densecap/vocabulary.hpp"

namespace densecap {

template <typename T>
struct LmWeights {
  Var<T> cond_w;  // D x E
  Var<T> cond_b;  // E
  Var<T> embed;   // (K + 1) x E, last row is START
  ops::LstmParams<T> lstm;
  Var<T> out_w;  // H x K
  Var<T> out_b;  // K

  std::size_t classes() const { return out_b.size(); }
  int start_token() const { return int(classes()); }
  std::size_t hidden() const { return lstm.w_hidden.shape()[0]; }
};

/// Region code -> first LSTM input.
template <typename T>
Var<T> condition(const LmWeights<T>& w, Var<T> codes) {
  return ops::relu(ops::linear(codes, w.cond_w, w.cond_b));
}

namespace detail {

template <typename T>
ops::LstmState<T> zero_state(Tape<T>& tape, std::size_t n, std::size_t h) {
  return {tape.constant(Tensor<T>(Shape{n, h})), tape.constant(Tensor<T>(Shape{n, h}))};
}

template <typename T>
Var<T> embed_tokens(const LmWeights<T>& w, const std::vector<std::size_t>& tokens) {
  return ops::gather_rows(w.embed, std::span<const std::size_t>(tokens));
}

/// State after consuming x_-1 and START.
template <typename T>
ops::LstmState<T> prime(const LmWeights<T>& w, Var<T> codes) {
  const std::size_t n = codes.shape()[0];
  auto st = lstm_step(condition(w, codes), zero_state(*codes.tape, n, w.hidden()), w.lstm);
  std::vector<std::size_t> start(n, std::size_t(w.start_token()));
  return lstm_step(embed_tokens(w, start), st, w.lstm);
}

inline void check_captions(const std::vector<std::vector<int>>& caps, std::size_t n,
                           std::size_t classes) {
  require(caps.size() == n, "language model: ", n, " regions but ", caps.size(), " captions");
  for (const auto& c : caps) {
    require(!c.empty(), "language model: empty caption");
    for (int t : c)
      require(t > 0 && std::size_t(t) < classes, "language model: caption token ", t,
              " outside [1, ", classes, ")");
  }
}

template <typename T>
double log_softmax_at(const T* row, std::size_t K, int target) {
  const T mx = *std::max_element(row, row + K);
  T z = T(0);
  for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
  return -double(std::log(z) - (row[target] - mx));
}

}  // namespace detail

/// Teacher-forced logits: step t (t = 0..T_max) predicts s_{t+1}, or END at
/// t = T_r. Rows whose caption is shorter carry target -1 past their end.
template <typename T>
struct TeacherForced {
  std::vector<Var<T>> logits;              // each N x K
  std::vector<std::vector<int>> targets;  // [step][row]
};

template <typename T>
TeacherForced<T> teacher_force(const LmWeights<T>& w, Var<T> codes,
                               const std::vector<std::vector<int>>& captions) {
  const std::size_t n = codes.shape()[0];
  detail::check_captions(captions, n, w.classes());
  std::size_t tmax = 0;
  for (const auto& c : captions) tmax = std::max(tmax, c.size());
  TeacherForced<T> tf;
  auto st = detail::prime(w, codes);
  for (std::size_t t = 0; t <= tmax; ++t) {
    if (t > 0) {
      std::vector<std::size_t> in(n, std::size_t(Vocabulary::kEnd));
      for (std::size_t r = 0; r < n; ++r)
        if (t <= captions[r].size()) in[r] = std::size_t(captions[r][t - 1]);
      st = lstm_step(detail::embed_tokens(w, in), st, w.lstm);
    }
    tf.logits.push_back(ops::linear(st.h, w.out_w, w.out_b));
    std::vector<int> tgt(n, -1);
    for (std::size_t r = 0; r < n; ++r) {
      if (t < captions[r].size()) tgt[r] = captions[r][t];
      else if (t == captions[r].size()) tgt[r] = Vocabulary::kEnd;
    }
    tf.targets.push_back(std::move(tgt));
  }
  return tf;
}

/// Mean over regions of the per-step cross-entropy averaged over the
/// T_r + 1 scored steps; equals mean_r(-logprob_r / (T_r + 1)).
template <typename T>
Var<T> caption_loss(const LmWeights<T>& w, Var<T> codes,
                    const std::vector<std::vector<int>>& captions) {
  const std::size_t n = codes.shape()[0];
  require(n > 0, "caption_loss: no regions");
  auto tf = teacher_force(w, codes, captions);
  std::vector<T> weight(n);
  for (std::size_t r = 0; r < n; ++r) weight[r] = T(1) / (T(n) * T(captions[r].size() + 1));
  Var<T> total;
  for (std::size_t t = 0; t < tf.logits.size(); ++t) {
    auto term = ops::weighted_cross_entropy(tf.logits[t], tf.targets[t], weight);
    total = t == 0 ? term : ops::add(total, term);
  }
  return total;
}

/// Per-row log-probability of each caption followed by END.
template <typename T>
std::vector<double> sequence_logprob(const LmWeights<T>& w, Var<T> codes,
                                     const std::vector<std::vector<int>>& captions) {
  const std::size_t n = codes.shape()[0];
  auto tf = teacher_force(w, codes, captions);
  const std::size_t K = w.classes();
  std::vector<double> out(n, 0.0);
  for (std::size_t t = 0; t < tf.logits.size(); ++t) {
    const auto& lv = tf.logits[t].value();
    for (std::size_t r = 0; r < n; ++r) {
      const int tgt = tf.targets[t][r];
      if (tgt < 0) continue;
      out[r] += detail::log_softmax_at(&lv[r * K], K, tgt);
    }
  }
  return out;
}

/// LSTM state of each region after x_-1 and START; shared by every caption
/// scored against the same regions.
template <typename T>
struct PrimedState {
  Tensor<T> h, c;  // N x H
};

template <typename T>
PrimedState<T> prime_state(const LmWeights<T>& w, Var<T> codes) {
  auto st = detail::prime(w, codes);
  return {st.h.value(), st.c.value()};
}

/// Log-probability of one caption (then END) for every primed region.
/// Agrees with sequence_logprob on the same regions.
template <typename T>
std::vector<double> continuation_logprob(const LmWeights<T>& w, const PrimedState<T>& s,
                                         const std::vector<int>& caption) {
  const std::size_t n = s.h.shape()[0], K = w.classes();
  detail::check_captions({caption}, 1, K);
  Tape<T>& tape = *w.out_w.tape;
  ops::LstmState<T> st{tape.constant(s.h), tape.constant(s.c)};
  std::vector<double> out(n, 0.0);
  for (std::size_t t = 0; t <= caption.size(); ++t) {
    if (t > 0)
      st = lstm_step(detail::embed_tokens(w, std::vector<std::size_t>(n, std::size_t(caption[t - 1]))),
                     st, w.lstm);
    Var<T> logits = ops::linear(st.h, w.out_w, w.out_b);
    const auto& lv = logits.value();
    const int tgt = t < caption.size() ? caption[t] : Vocabulary::kEnd;
    for (std::size_t r = 0; r < n; ++r) {
      out[r] += detail::log_softmax_at(&lv[r * K], K, tgt);
    }
  }
  return out;
}

/// Greedy decoding. END and UNK are never emitted as words; START is not a
/// prediction class. Returned captions exclude END.
template <typename T>
std::vector<std::vector<int>> generate(const LmWeights<T>& w, Var<T> codes, std::size_t max_len) {
  const std::size_t n = codes.shape()[0], K = w.classes();
  std::vector<std::vector<int>> out(n);
  if (n == 0 || max_len == 0) return out;
  std::vector<bool> done(n, false);
  auto st = detail::prime(w, codes);
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto& lv = ops::linear(st.h, w.out_w, w.out_b).value();
    std::vector<std::size_t> next(n, std::size_t(Vocabulary::kEnd));
    bool any = false;
    for (std::size_t r = 0; r < n; ++r) {
      if (done[r]) continue;
      std::size_t best = 0;
      T best_v = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        if (int(k) == Vocabulary::kUnk) continue;
        if (lv[r * K + k] > best_v) best_v = lv[r * K + k], best = k;
      }
      if (int(best) == Vocabulary::kEnd) {
        done[r] = true;
        continue;
      }
      out[r].push_back(int(best));
      next[r] = best;
      any = true;
    }
    if (!any) break;
    st = lstm_step(detail::embed_tokens(w, next), st, w.lstm);
  }
  return out;
}

}  // namespace densecap
