// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op is evaluated single-threaded in a fixed
// order, so results are bit-reproducible. Binary elementwise ops broadcast only
// over leading dimensions: the smaller operand's shape must be a suffix of the
// larger one's.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "minitune/autograd.hpp"
#include "minitune/tensor.hpp"

namespace minitune::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, float s);
Tensor mul_scalar(const Tensor& x, float s);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, float exponent);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim = false);
/// Gradient flows to the first maximal element of each slice.
Tensor max(const Tensor& x, std::int64_t axis, bool keepdim = false);

/// Along the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// a: [..., M, K], b: [..., K, N] with equal leading dims, or b 2-D.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: [..., in], weight: [out, in] -> x · weightᵀ.
Tensor linear(const Tensor& x, const Tensor& weight);

/// weight: [V, E]; ids of shape `ids_shape` -> [ids_shape..., E].
Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids, const Shape& ids_shape);
/// Picks x[..., idx[r]] for every row r of the leading dims.
Tensor gather_last(const Tensor& x, std::span<const std::int32_t> idx);

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t end);
Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::int64_t dim0, std::int64_t dim1);
/// [B, H, S, D] -> [B, H*n, S, D], each head repeated n times in place.
Tensor repeat_heads(const Tensor& x, std::int64_t n);

/// x / sqrt(mean(x², last axis) + eps) · weight.
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps);

/// Precomputed rotary angles for positions [0, max_positions).
class RopeTable {
 public:
  RopeTable(std::int64_t head_dim, std::int64_t max_positions, double base);
  std::int64_t head_dim() const { return head_dim_; }
  std::int64_t max_positions() const { return max_positions_; }
  double base() const { return base_; }
  float cos(std::int64_t pos, std::int64_t pair) const { return cos_[static_cast<std::size_t>(pos * half_ + pair)]; }
  float sin(std::int64_t pos, std::int64_t pair) const { return sin_[static_cast<std::size_t>(pos * half_ + pair)]; }

 private:
  std::int64_t head_dim_;
  std::int64_t half_;
  std::int64_t max_positions_;
  double base_;
  std::vector<float> cos_;
  std::vector<float> sin_;
};

/// Rotates interleaved (even, odd) pairs of x: [B, H, S, D]. `positions` has
/// S entries (shared across the batch) or B*S entries.
Tensor rope(const Tensor& x, std::span<const std::int32_t> positions, const RopeTable& table);
Tensor rope_apply(const Tensor& x, std::span<const std::int32_t> positions, double base);

/// Inverted dropout with a mask drawn from `seed`. Identity when p == 0.
Tensor dropout(const Tensor& x, float p, std::uint64_t seed);

/// 1.0 where a > b, else 0.0. Never requires grad.
Tensor greater(const Tensor& a, const Tensor& b);
Tensor less(const Tensor& a, const Tensor& b);

}  // namespace minitune::ops
