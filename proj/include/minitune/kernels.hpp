// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference kernels with fixed accumulation order. Row-major storage.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

namespace minitune::kernels {

/// C[M,N] += A[M,K] · B[K,N].
inline void gemm_nn_acc(std::int64_t M, std::int64_t K, std::int64_t N, const float* A, const float* B, float* C) {
  for (std::int64_t i = 0; i < M; ++i) {
    float* c = C + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const float a = A[i * K + k];
      const float* b = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

/// C[M,N] = A[M,K] · B[N,K]ᵀ.
inline void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t N, const float* A, const float* B, float* C) {
  for (std::int64_t i = 0; i < M; ++i) {
    const float* a = A + i * K;
    for (std::int64_t j = 0; j < N; ++j) {
      const float* b = B + j * K;
      float acc = 0.0f;
      for (std::int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] = acc;
    }
  }
}

/// C[M,N] += A[K,M]ᵀ · B[K,N].
inline void gemm_tn_acc(std::int64_t M, std::int64_t K, std::int64_t N, const float* A, const float* B, float* C) {
  for (std::int64_t k = 0; k < K; ++k) {
    const float* a = A + k * M;
    const float* b = B + k * N;
    for (std::int64_t i = 0; i < M; ++i) {
      const float s = a[i];
      float* c = C + i * N;
      for (std::int64_t j = 0; j < N; ++j) c[j] += s * b[j];
    }
  }
}

inline float row_max(std::span<const float> in) {
  float m = -std::numeric_limits<float>::infinity();
  for (float v : in) m = v > m ? v : m;
  return m;
}

inline void softmax_row(std::span<const float> in, std::span<float> out) {
  const float m = row_max(in);
  float total = 0.0f;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - m);
    total += out[i];
  }
  for (std::size_t i = 0; i < in.size(); ++i) out[i] /= total;
}

inline float logsumexp(std::span<const float> in) {
  const float m = row_max(in);
  if (std::isinf(m)) return m;
  float total = 0.0f;
  for (float v : in) total += std::exp(v - m);
  return m + std::log(total);
}

}  // namespace minitune::kernels
