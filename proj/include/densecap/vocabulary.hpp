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
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "densecap/errors.hpp"

namespace densecap {

/// Lower-cased whitespace tokenization.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Token/index bijection.
///
/// Index layout: 0 = END, 1 = UNK, 2.. = words in file order. The output
/// layer predicts indices [0, output_size()); START = output_size() is an
/// input-only index and never a prediction target.
class Vocabulary {
 public:
  static constexpr int kEnd = 0;
  static constexpr int kUnk = 1;
  static constexpr int kFirstWord = 2;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      require(!words_[i].empty(), "vocabulary: empty token at line ", i + 1);
      require(index_.emplace(words_[i], kFirstWord + int(i)).second,
              "vocabulary: duplicate token '", words_[i], "'");
    }
  }

  std::size_t num_words() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  /// Number of prediction classes: words + END + UNK.
  std::size_t output_size() const noexcept { return words_.size() + 2; }
  int start_token() const noexcept { return int(output_size()); }
  /// Rows of an embedding table indexed by any input token, START included.
  std::size_t input_size() const noexcept { return output_size() + 1; }

  int index_of(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

  std::string token(int index) const {
    if (index == kEnd) return "<end>";
    if (index == kUnk) return "<unk>";
    if (index == start_token()) return "<start>";
    require(index >= kFirstWord && index < start_token(), "vocabulary: index ", index,
            " out of range");
    return words_[std::size_t(index - kFirstWord)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : tokenize(text)) out.push_back(index_of(w));
    return out;
  }

  /// Joins tokens with spaces, stopping at END.
  std::string decode(const std::vector<int>& tokens) const {
    std::string out;
    for (int t : tokens) {
      if (t == kEnd) break;
      if (!out.empty()) out.push_back(' ');
      out += token(t);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& w : words_) out << w << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary " + path);
    std::vector<std::string> words;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.find_first_of(" \t") != std::string::npos)
        throw DataError(path + ":" + std::to_string(lineno) + ": expected one token per line");
      words.push_back(line);
    }
    try {
      return Vocabulary(std::move(words));
    } catch (const ContractError& e) {
      throw DataError(path + ": " + e.what());
    }
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Words occurring at least `min_count` times, ordered by count descending
/// then token ascending. Rarer words map to UNK.
inline Vocabulary build_vocabulary(const std::vector<std::string>& captions, std::size_t min_count) {
  require(min_count >= 1, "build_vocabulary: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& c : captions)
    for (auto& w : tokenize(c)) ++counts[w];
  if (counts.empty()) throw DataError("build_vocabulary: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [w, n] : counts)
    if (n >= min_count) kept.emplace_back(w, n);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, n] : kept) words.push_back(w);
  return Vocabulary(std::move(words));
}

}  // namespace densecap
