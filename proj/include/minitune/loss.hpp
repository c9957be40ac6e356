// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token-level objectives. Both cross-entropy variants reduce by the mean over
// non-ignored targets and record their allocations under the "loss" phase.

#pragma once

#include <cstdint>
#include <span>

#include "minitune/autograd.hpp"
#include "minitune/tensor.hpp"

namespace minitune::loss {

inline constexpr std::int32_t kIgnoreIndex = -100;

struct LossResult {
  Tensor loss;
  std::int64_t num_valid_tokens = 0;
  /// Peak live bytes observed under the "loss" phase by the active meter (0 without one).
  std::int64_t loss_phase_peak_bytes = 0;
};

/// logits [..., V], one target per row. A batch with no valid target yields
/// loss 0 and zero gradients.
LossResult cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                         std::int32_t ignore_index = kIgnoreIndex);

struct LceOptions {
  std::int64_t chunk_size = 256;
  std::int32_t ignore_index = kIgnoreIndex;
};

struct LceStats {
  std::int64_t projected_rows = 0;
  std::int64_t chunks = 0;
  /// Largest logits buffer held at once, in bytes.
  std::int64_t peak_logits_bytes = 0;
};

/// cross_entropy(hidden · weightᵀ, targets) without materializing the full
/// logits: ignored rows are dropped first, the rest are projected in chunks of
/// at most chunk_size rows, and backward recomputes each chunk.
/// hidden [..., E], weight [V, E].
LossResult linear_cross_entropy(const Tensor& hidden, const Tensor& weight, std::span<const std::int32_t> targets,
                                const LceOptions& options = {}, LceStats* stats = nullptr);

/// Clipped surrogate: -mean over masked tokens of min(r·A, clip(r, 1-ε, 1+ε)·A)
/// with r = exp(new - behavior). Gradient flows to new_logprobs only.
/// new/behavior/mask: [G, T]; advantages: [G]; mask entries are 0 or 1.
Tensor grpo_objective(const Tensor& new_logprobs, const Tensor& behavior_logprobs, std::span<const float> advantages,
                      const Tensor& token_mask, float clip_epsilon = 0.2f);

}  // namespace minitune::loss
