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
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "densecap/errors.hpp"
#include "densecap/tensor.hpp"

namespace densecap {

template <typename T>
class Tape;

/// Handle to a tensor recorded on a tape. Cheap to copy; only valid while
/// the owning tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t size() const { return tape->value(id).size(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode recorder. Every primitive appends one node holding its
/// output value and a closure that propagates the output gradient into the
/// inputs. `backward` replays the closures in reverse execution order once.
///
/// A tape is single-owner: do not share one across threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is never requested.
  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, nullptr, "constant");
  }

  /// Leaf that receives a gradient.
  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), true, nullptr, "variable");
  }

  /// Appends the output of a primitive. `fn` is dropped when no input needs
  /// a gradient, which makes inference on a tape allocation-light.
  Var<T> record(const char* op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var<T>& v : inputs) {
      require(v.tape == this, op, ": input belongs to another tape");
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, op);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient flowing into node `id` during backward (empty when no
  /// downstream consumer produced one).
  std::span<const T> out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation target for the gradient of input `id`. Empty span when
  /// the input does not require a gradient.
  std::span<T> grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Runs reverse accumulation from a scalar loss. Allowed once per tape.
  void backward(Var<T> loss) {
    require(loss.tape == this, "backward: loss belongs to another tape");
    require(!consumed_, "backward: tape already consumed");
    require(nodes_[loss.id].value.size() == 1,
            "backward: loss must be a scalar, got shape ",
            shape_str(nodes_[loss.id].value.shape()));
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad.assign(1, T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this);
      // Intermediate closures may own large saved buffers.
      n.backward = nullptr;
    }
  }

  bool consumed() const noexcept { return consumed_; }

  /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape(), T(0));
    return Tensor<T>(n.value.shape(), n.grad);
  }

  /// Checked mode: every recorded value is scanned for NaN/Inf.
  void set_checked(bool on) noexcept { checked_ = on; }
  bool checked() const noexcept { return checked_; }

  /// Kink tracking: nondifferentiable primitives mix their discrete
  /// branch decisions (relu signs, pooling argmax, interpolation cells)
  /// into a running signature. Two forward passes with equal signatures
  /// evaluated the same smooth piece.
  void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
  bool tracks_kinks() const noexcept { return track_kinks_; }
  void mix_kink(std::uint64_t v) noexcept {
    kink_sig_ ^= v + 0x9e3779b97f4a7c15ULL + (kink_sig_ << 6) + (kink_sig_ >> 2);
  }
  std::uint64_t kink_signature() const noexcept { return kink_sig_; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, const char* op) {
    require(!consumed_, op, ": tape already consumed");
    if (checked_ && !value.all_finite())
      throw NumericError(std::string(op) + ": non-finite value in checked mode");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool checked_ = false;
  bool track_kinks_ = false;
  std::uint64_t kink_sig_ = 0;
};

}  // namespace densecap
