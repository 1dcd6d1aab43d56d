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

// Central finite-difference oracle for tape gradients. Test-only: it only
// evaluates forward passes and never looks at the backward closures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "densecap/autodiff.hpp"
#include "densecap/ops.hpp"
#include "densecap/tensor.hpp"

namespace densecap::testing {

using LossFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

// Denominator floor for the relative error; keeps gradients that are zero up
// to rounding from dividing by ~0.
inline constexpr double kRelFloor = 1e-4;

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kRelFloor});
}

/// Compares the tape gradient of `fn` w.r.t. every input against central
/// differences with step `h`. At most `max_coords` coordinates per input are
/// probed (chosen by `seed`). A probe whose +h or -h evaluation lands on a
/// different smooth piece (different kink signature) is skipped.
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& inputs, const LossFn& fn,
                                  double h = 1e-5, std::size_t max_coords = 40,
                                  std::uint64_t seed = 7) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, std::uint64_t* sig) {
    Tape<double> tape;
    tape.set_track_kinks(true);
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    const double v = fn(tape, vars).value().item();
    if (sig) *sig = tape.kink_signature();
    return v;
  };

  Tape<double> tape;
  tape.set_track_kinks(true);
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var<double> loss = fn(tape, vars);
  const std::uint64_t base_sig = tape.kink_signature();
  tape.backward(loss);

  GradCheckResult res;
  std::mt19937_64 rng(seed);
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = tape.grad(vars[k]);
    std::vector<std::size_t> coords(inputs[k].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    shuffle(coords.begin(), coords.end(), rng);
    if (coords.size() > max_coords) coords.resize(max_coords);
    for (std::size_t i : coords) {
      const double x0 = work[k][i];
      std::uint64_t sp = 0, sm = 0;
      work[k][i] = x0 + h;
      const double fp = evaluate(work, &sp);
      work[k][i] = x0 - h;
      const double fm = evaluate(work, &sm);
      work[k][i] = x0;
      if (sp != base_sig || sm != base_sig) {
        ++res.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2 * h);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[i], numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * standard_normal(rng);
  return t;
}

/// sum(out * w) for a fixed random projection w, so every output element
/// carries a distinct upstream gradient.
inline Var<double> random_projection(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tape<double>& tape = *out.tape;
  Var<double> w = tape.constant(random_tensor(out.shape(), rng));
  return ops::sum(ops::mul(out, w));
}

}  // namespace densecap::testing
