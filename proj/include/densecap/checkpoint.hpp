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

// Checkpoint file layout, all integers little-endian:
//
//   8 bytes   magic "DCAPCKPT"
//   u32       format version (1)
//   u32       bytes per scalar (4 = float, 8 = double)
//   u64       header length L
//   L bytes   header JSON: {"model": ..., "vocab": [words], "iteration": n,
//             "run_config": {...}, "optimizer": bool}
//   u32       tensor count, then per tensor:
//               u32 name length, name bytes, u32 rank, u64 dims[rank],
//               scalars in row-major order (IEEE-754, little-endian)
//
// Tensors are the model parameters by name. When "optimizer" is true they
// are followed by "<name>:velocity", "<name>:adam_m", "<name>:adam_v" for
// every parameter, and the header carries "adam_steps".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "densecap/config.hpp"
#include "densecap/model.hpp"
#include "densecap/training.hpp"
#include "densecap/vocabulary.hpp"

namespace densecap {

inline constexpr char kCheckpointMagic[8] = {'D', 'C', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <typename U>
void put(std::ostream& out, U v) {
  v = byteswap_if_big(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U take(std::istream& in, const std::string& path) {
  U v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw DataError(path + ": truncated checkpoint");
  return byteswap_if_big(v);
}

template <typename T>
void put_tensor(std::ostream& out, const std::string& name, const Tensor<T>& t) {
  put<std::uint32_t>(out, std::uint32_t(name.size()));
  out.write(name.data(), std::streamsize(name.size()));
  put<std::uint32_t>(out, std::uint32_t(t.shape().size()));
  for (auto d : t.shape()) put<std::uint64_t>(out, std::uint64_t(d));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    else put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
std::pair<std::string, Tensor<T>> take_tensor(std::istream& in, const std::string& path) {
  const auto len = take<std::uint32_t>(in, path);
  if (len > (1u << 16)) throw DataError(path + ": implausible tensor name length");
  std::string name(len, '\0');
  if (!in.read(name.data(), len)) throw DataError(path + ": truncated checkpoint");
  const auto rank = take<std::uint32_t>(in, path);
  if (rank > 8) throw DataError(path + ": tensor " + name + " has rank " + std::to_string(rank));
  Shape shape;
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = take<std::uint64_t>(in, path);
    if (d > (1ull << 32)) throw DataError(path + ": tensor " + name + " has implausible size");
    shape.push_back(std::size_t(d));
    n *= d;
    if (n > (1ull << 32)) throw DataError(path + ": tensor " + name + " has implausible size");
  }
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    if constexpr (sizeof(T) == 4) v = std::bit_cast<T>(take<std::uint32_t>(in, path));
    else v = std::bit_cast<T>(take<std::uint64_t>(in, path));
  }
  return {std::move(name), std::move(t)};
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  DenseCapModel<T> model;
  Vocabulary vocab;
  std::size_t iteration = 0;
  Json run_config;
  std::optional<OptimizerState<T>> optimizer;  // groups are left empty
};

template <typename T>
void save_checkpoint(const std::string& path, const DenseCapModel<T>& model, const Vocabulary& vocab,
                     std::size_t iteration, const Json& run_config,
                     const OptimizerState<T>* opt = nullptr) {
  require(vocab.output_size() == model.config().vocab_classes,
          "checkpoint: vocabulary does not match the model");
  Json header = Json::object();
  header["model"] = model_config_to_json(model.config());
  header["vocab"] = vocab.words();
  header["iteration"] = iteration;
  header["run_config"] = run_config;
  header["optimizer"] = opt != nullptr;
  if (opt) {
    Json steps = Json::array();
    for (const auto& m : opt->moments) steps.push_back(m.step);
    header["adam_steps"] = steps;
  }
  const std::string hs = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, 8);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint32_t>(out, std::uint32_t(sizeof(T)));
    detail::put<std::uint64_t>(out, std::uint64_t(hs.size()));
    out.write(hs.data(), std::streamsize(hs.size()));
    const auto& ps = model.params();
    detail::put<std::uint32_t>(out, std::uint32_t(ps.size() * (opt ? 4 : 1)));
    for (const auto& p : ps) detail::put_tensor(out, p.name, p.value);
    if (opt) {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        detail::put_tensor(out, ps[i].name + ":velocity", opt->velocity[i]);
        detail::put_tensor(out, ps[i].name + ":adam_m", opt->moments[i].m);
        detail::put_tensor(out, ps[i].name + ":adam_v", opt->moments[i].v);
      }
    }
    if (!out) throw DataError("write failed for checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError(path + ": not a checkpoint file");
  const auto version = detail::take<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto scalar = detail::take<std::uint32_t>(in, path);
  if (scalar != sizeof(T))
    throw ConfigError(path + ": checkpoint holds " + std::to_string(scalar * 8) +
                      "-bit scalars, requested " + std::to_string(sizeof(T) * 8) + "-bit precision");
  const auto hlen = detail::take<std::uint64_t>(in, path);
  if (hlen > (1ull << 28)) throw DataError(path + ": implausible header length");
  std::string hs(hlen, '\0');
  if (!in.read(hs.data(), std::streamsize(hlen))) throw DataError(path + ": truncated checkpoint");

  Checkpoint<T> ck;
  Json header;
  bool with_opt = false;
  std::vector<std::uint64_t> adam_steps;
  try {
    header = Json::parse(hs);
    ck.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
    ck.iteration = header.at("iteration").get<std::size_t>();
    ck.run_config = header.at("run_config");
    with_opt = header.at("optimizer").get<bool>();
    if (with_opt) adam_steps = header.at("adam_steps").get<std::vector<std::uint64_t>>();
  } catch (const Json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }
  ModelConfig mc = model_config_from_json(header.at("model"));
  if (mc.vocab_classes != ck.vocab.output_size())
    throw DataError(path + ": vocabulary size disagrees with the model");
  ck.model = DenseCapModel<T>(mc, 0);

  std::map<std::string, Tensor<T>> tensors;
  const auto count = detail::take<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = detail::take_tensor<T>(in, path);
    if (!tensors.emplace(name, std::move(t)).second)
      throw DataError(path + ": duplicate tensor " + name);
  }
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError(path + ": missing tensor " + name);
    if (it->second.shape() != shape) throw DataError(path + ": tensor " + name + " has the wrong shape");
    Tensor<T> t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  auto& ps = ck.model.params();
  for (auto& p : ps) p.value = fetch(p.name, p.value.shape());
  if (with_opt) {
    if (adam_steps.size() != ps.size()) throw DataError(path + ": optimizer step count mismatch");
    OptimizerState<T> st;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Shape& s = ps[i].value.shape();
      st.velocity.push_back(fetch(ps[i].name + ":velocity", s));
      AdamState<T> a;
      a.m = fetch(ps[i].name + ":adam_m", s);
      a.v = fetch(ps[i].name + ":adam_v", s);
      a.step = adam_steps[i];
      st.moments.push_back(std::move(a));
    }
    ck.optimizer = std::move(st);
  }
  if (!tensors.empty()) throw DataError(path + ": unexpected tensor " + tensors.begin()->first);
  return ck;
}

/// Throws ConfigError when `requested` disagrees with the architecture a
/// checkpoint was trained with.
inline void check_model_config(const ModelConfig& stored, ModelConfig requested, const std::string& path) {
  requested.vocab_classes = stored.vocab_classes;
  if (!(requested == stored)) {
    throw ConfigError(path + ": model config differs from the checkpoint (stored " +
                      model_config_to_json(stored).dump() + ", requested " +
                      model_config_to_json(requested).dump() + ")");
  }
}

}  // namespace densecap
