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
#include <cstddef>
#include <vector>

// Row-major single-threaded matrix products used by the tape primitives.
// All variants accumulate into C (C += op(A) * op(B)); callers zero C first
// when they want a plain product. Loop orders keep the innermost loop
// contiguous so the compiler can vectorize it without reassociating sums,
// which keeps results bit-reproducible across runs.

namespace densecap::gemm {

namespace detail {
constexpr std::size_t kRowBlock = 8;
}

/// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  using detail::kRowBlock;
  for (std::size_t i0 = 0; i0 < M; i0 += kRowBlock) {
    const std::size_t i1 = std::min(M, i0 + kRowBlock);
    for (std::size_t k = 0; k < K; ++k) {
      const T* brow = B + k * N;
      for (std::size_t i = i0; i < i1; ++i) {
        const T a = A[i * K + k];
        if (a == T(0)) continue;
        T* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  }
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  using detail::kRowBlock;
  for (std::size_t i0 = 0; i0 < M; i0 += kRowBlock) {
    const std::size_t i1 = std::min(M, i0 + kRowBlock);
    for (std::size_t k = 0; k < K; ++k) {
      const T* brow = B + k * N;
      const T* arow = A + k * M;
      for (std::size_t i = i0; i < i1; ++i) {
        const T a = arow[i];
        if (a == T(0)) continue;
        T* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  }
}

/// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::vector<T> bt(K * N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
  nn(M, N, K, A, bt.data(), C);
}

}  // namespace densecap::gemm
