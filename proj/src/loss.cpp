// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "minitune/kernels.hpp"
#include "minitune/memory.hpp"

namespace minitune::loss {

namespace {

std::int64_t loss_peak() {
  auto meter = active_meter();
  return meter ? meter->snapshot().phase_peak("loss") : 0;
}

void check_targets(std::span<const std::int32_t> targets, std::int64_t vocab, std::int32_t ignore) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto t = targets[i];
    if (t != ignore && (t < 0 || t >= vocab)) {
      throw std::out_of_range("cross entropy: target " + std::to_string(t) + " at row " + std::to_string(i) +
                              " outside [0, " + std::to_string(vocab) + ")");
    }
  }
}

// Negative log-likelihood of one row. Both cross-entropy paths go through
// these two functions so their results agree bit for bit.
float row_nll(std::span<const float> row, std::int32_t target) {
  return kernels::logsumexp(row) - row[static_cast<std::size_t>(target)];
}

// Overwrites `row` (logits) with scale · (softmax(row) - onehot(target)).
void row_nll_grad(std::span<float> row, std::int32_t target, float scale) {
  const float lse = kernels::logsumexp(row);
  for (auto& v : row) v = std::exp(v - lse) * scale;
  row[static_cast<std::size_t>(target)] -= scale;
}

}  // namespace

LossResult cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index) {
  PhaseScope phase("loss");
  if (logits.dim() < 1) throw ShapeError("cross_entropy: logits must have a vocabulary axis");
  const auto v = logits.size(-1);
  const auto n = v == 0 ? 0 : logits.numel() / v;
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  check_targets(targets, v, ignore_index);
  auto x = logits.data();
  float total = 0.0f;
  std::int64_t valid = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    total += row_nll(x.subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v)), t);
    ++valid;
  }
  const float value = valid > 0 ? total / static_cast<float>(valid) : 0.0f;
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  Tensor loss = record_op("cross_entropy", Tensor::scalar(value), {logits},
                          [logits = logits.detach(), tgt = std::move(tgt), n, v, valid,
                           ignore_index](const Tensor& g) -> std::vector<Tensor> {
                            Tensor grad = Tensor::zeros(logits.shape());
                            if (valid == 0) return {grad};
                            const float scale = g.item() / static_cast<float>(valid);
                            auto out = grad.mutable_data();
                            auto in = logits.data();
                            for (std::int64_t r = 0; r < n; ++r) {
                              const auto t = tgt[static_cast<std::size_t>(r)];
                              if (t == ignore_index) continue;
                              auto row = out.subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v));
                              auto src = in.subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v));
                              std::copy(src.begin(), src.end(), row.begin());
                              row_nll_grad(row, t, scale);
                            }
                            return {grad};
                          });
  return {loss, valid, loss_peak()};
}

LossResult linear_cross_entropy(const Tensor& hidden, const Tensor& weight, std::span<const std::int32_t> targets,
                                const LceOptions& options, LceStats* stats) {
  PhaseScope phase("loss");
  if (options.chunk_size < 1) throw std::invalid_argument("linear_cross_entropy: chunk_size must be >= 1");
  if (weight.dim() != 2 || hidden.dim() < 1 || hidden.size(-1) != weight.size(1)) {
    throw ShapeError("linear_cross_entropy: incompatible shapes " + shape_str(hidden.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  const auto e = weight.size(1);
  const auto v = weight.size(0);
  const auto n = e == 0 ? 0 : hidden.numel() / e;
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("linear_cross_entropy: " + std::to_string(targets.size()) + " targets for hidden " +
                     shape_str(hidden.shape()));
  }
  check_targets(targets, v, options.ignore_index);

  // Mask first: only rows with a real target are ever projected.
  std::vector<std::int64_t> rows;
  for (std::int64_t r = 0; r < n; ++r) {
    if (targets[static_cast<std::size_t>(r)] != options.ignore_index) rows.push_back(r);
  }
  const auto valid = static_cast<std::int64_t>(rows.size());
  const auto chunk = options.chunk_size;
  LceStats local;

  // Gathers the hidden rows of chunk [begin, end) and projects them.
  auto project = [e, v](const Tensor& h, const Tensor& w, const std::vector<std::int64_t>& idx, std::int64_t begin,
                        std::int64_t end, std::vector<float>& gathered) {
    const auto m = end - begin;
    gathered.resize(static_cast<std::size_t>(m * e));
    auto hs = h.data();
    for (std::int64_t i = 0; i < m; ++i) {
      auto src = hs.subspan(static_cast<std::size_t>(idx[static_cast<std::size_t>(begin + i)] * e), static_cast<std::size_t>(e));
      std::copy(src.begin(), src.end(), gathered.begin() + i * e);
    }
    Tensor logits = Tensor::zeros({m, v}, AllocTag::kLogits);
    kernels::gemm_nt(m, e, v, gathered.data(), w.data().data(), logits.mutable_data().data());
    return logits;
  };

  float total = 0.0f;
  std::vector<float> gathered;
  for (std::int64_t begin = 0; begin < valid; begin += chunk) {
    const auto end = std::min(valid, begin + chunk);
    Tensor logits = project(hidden, weight, rows, begin, end, gathered);
    auto ls = logits.data();
    for (std::int64_t i = 0; i < end - begin; ++i) {
      total += row_nll(ls.subspan(static_cast<std::size_t>(i * v), static_cast<std::size_t>(v)),
                       targets[static_cast<std::size_t>(rows[static_cast<std::size_t>(begin + i)])]);
    }
    local.projected_rows += end - begin;
    ++local.chunks;
    local.peak_logits_bytes = std::max(local.peak_logits_bytes, logits.nbytes());
  }
  if (stats) *stats = local;
  const float value = valid > 0 ? total / static_cast<float>(valid) : 0.0f;

  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  Tensor loss = record_op(
      "linear_cross_entropy", Tensor::scalar(value), {hidden, weight},
      [h = hidden.detach(), w = weight.detach(), rh = hidden.requires_grad(), rw = weight.requires_grad(),
       rows = std::move(rows), tgt = std::move(tgt), project, valid, chunk, e, v](const Tensor& g) -> std::vector<Tensor> {
        PhaseScope phase("loss");
        std::vector<float> dh(rh ? static_cast<std::size_t>(h.numel()) : 0, 0.0f);
        std::vector<float> dw(rw ? static_cast<std::size_t>(w.numel()) : 0, 0.0f);
        const float scale = valid > 0 ? g.item() / static_cast<float>(valid) : 0.0f;
        std::vector<float> gathered;
        std::vector<float> row_dh(static_cast<std::size_t>(e));
        for (std::int64_t begin = 0; begin < valid; begin += chunk) {
          const auto end = std::min(valid, begin + chunk);
          const auto m = end - begin;
          Tensor logits = project(h, w, rows, begin, end, gathered);
          auto ls = logits.mutable_data();
          for (std::int64_t i = 0; i < m; ++i) {
            row_nll_grad(ls.subspan(static_cast<std::size_t>(i * v), static_cast<std::size_t>(v)),
                         tgt[static_cast<std::size_t>(rows[static_cast<std::size_t>(begin + i)])], scale);
          }
          if (rh) {
            for (std::int64_t i = 0; i < m; ++i) {
              std::fill(row_dh.begin(), row_dh.end(), 0.0f);
              kernels::gemm_nn_acc(1, v, e, ls.data() + i * v, w.data().data(), row_dh.data());
              std::copy(row_dh.begin(), row_dh.end(), dh.begin() + rows[static_cast<std::size_t>(begin + i)] * e);
            }
          }
          if (rw) kernels::gemm_tn_acc(v, m, e, ls.data(), gathered.data(), dw.data());
        }
        Tensor gh = rh ? Tensor(h.shape(), std::move(dh)) : Tensor();
        Tensor gw = rw ? Tensor(w.shape(), std::move(dw)) : Tensor();
        return {gh, gw};
      });
  return {loss, valid, loss_peak()};
}

Tensor grpo_objective(const Tensor& new_logprobs, const Tensor& behavior_logprobs, std::span<const float> advantages,
                      const Tensor& token_mask, float clip_epsilon) {
  if (new_logprobs.dim() != 2 || behavior_logprobs.shape() != new_logprobs.shape() ||
      token_mask.shape() != new_logprobs.shape()) {
    throw ShapeError("grpo_objective: new " + shape_str(new_logprobs.shape()) + ", behavior " +
                     shape_str(behavior_logprobs.shape()) + " and mask " + shape_str(token_mask.shape()) +
                     " must share one [G, T] shape");
  }
  const auto groups = new_logprobs.size(0);
  const auto len = new_logprobs.size(1);
  if (static_cast<std::int64_t>(advantages.size()) != groups) {
    throw ShapeError("grpo_objective: expected " + std::to_string(groups) + " advantages, got " +
                     std::to_string(advantages.size()));
  }
  if (!(clip_epsilon >= 0.0f)) throw std::invalid_argument("grpo_objective: clip epsilon must be non-negative");
  for (float a : advantages) {
    if (!std::isfinite(a)) throw std::invalid_argument("grpo_objective: non-finite advantage");
  }
  auto mask = token_mask.data();
  std::int64_t count = 0;
  for (float m : mask) {
    if (m != 0.0f && m != 1.0f) throw std::invalid_argument("grpo_objective: mask entries must be 0 or 1");
    count += m == 1.0f;
  }
  if (count == 0) throw std::invalid_argument("grpo_objective: token mask is empty");

  auto nl = new_logprobs.data();
  auto bl = behavior_logprobs.data();
  // Per-token d(-objective)/d(new) numerator, before the 1/count factor.
  std::vector<float> slope(nl.size(), 0.0f);
  float total = 0.0f;
  for (std::int64_t g = 0; g < groups; ++g) {
    const float a = advantages[static_cast<std::size_t>(g)];
    for (std::int64_t t = 0; t < len; ++t) {
      const auto i = static_cast<std::size_t>(g * len + t);
      if (mask[i] == 0.0f) continue;
      const float r = std::exp(nl[i] - bl[i]);
      const float rc = std::clamp(r, 1.0f - clip_epsilon, 1.0f + clip_epsilon);
      const float unclipped = r * a;
      const float clipped = rc * a;
      if (clipped < unclipped) {
        total += clipped;
      } else {
        total += unclipped;
        slope[i] = unclipped;
      }
    }
  }
  const float inv = 1.0f / static_cast<float>(count);
  return record_op("grpo_objective", Tensor::scalar(-total * inv), {new_logprobs, behavior_logprobs},
                   [slope = std::move(slope), shape = new_logprobs.shape(), inv](const Tensor& g) -> std::vector<Tensor> {
                     const float s = -g.item() * inv;
                     std::vector<float> d(slope.size());
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] = slope[i] * s;
                     return {Tensor(shape, std::move(d)), Tensor()};
                   });
}

}  // namespace minitune::loss
