// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "minitune/loss.hpp"
#include "minitune/memory.hpp"
#include "minitune/ops.hpp"
#include "support/gradcheck.hpp"

namespace mt = minitune;
namespace ops = minitune::ops;
using mt::Tensor;
using mt::loss::kIgnoreIndex;
using mt::testing::gradcheck;
using mt::testing::random_tensor;

namespace {

std::vector<std::int32_t> random_targets(std::int64_t n, std::int64_t v, double ignore_frac, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(v - 1));
  std::bernoulli_distribution ignore(ignore_frac);
  std::vector<std::int32_t> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = ignore(rng) ? kIgnoreIndex : tok(rng);
  return t;
}

// Direct log-sum-exp evaluation in double.
double lse_oracle(const Tensor& logits, const std::vector<std::int32_t>& targets) {
  const auto v = logits.size(-1);
  auto x = logits.data();
  double total = 0.0;
  int valid = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    double m = -1e300;
    for (std::int64_t j = 0; j < v; ++j) m = std::max(m, static_cast<double>(x[r * v + j]));
    double s = 0.0;
    for (std::int64_t j = 0; j < v; ++j) s += std::exp(x[r * v + j] - m);
    total += m + std::log(s) - x[r * v + targets[r]];
    ++valid;
  }
  return valid ? total / valid : 0.0;
}

struct Grads {
  float loss;
  std::vector<float> dh, dw;
};

Grads run_naive(const Tensor& h, const Tensor& w, const std::vector<std::int32_t>& t) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor wh = tape.watch(h), ww = tape.watch(w);
  auto res = mt::loss::cross_entropy(ops::linear(wh, ww), t);
  tape.backward(res.loss);
  return {res.loss.item(), tape.grad(wh).to_vector(), tape.grad(ww).to_vector()};
}

Grads run_lce(const Tensor& h, const Tensor& w, const std::vector<std::int32_t>& t, std::int64_t chunk) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor wh = tape.watch(h), ww = tape.watch(w);
  auto res = mt::loss::linear_cross_entropy(wh, ww, t, {chunk, kIgnoreIndex});
  tape.backward(res.loss);
  return {res.loss.item(), tape.grad(wh).to_vector(), tape.grad(ww).to_vector()};
}

}  // namespace

TEST(CrossEntropy, SingleClassIsZero) {
  auto res = mt::loss::cross_entropy(Tensor({3, 1}, {0.3f, -2.0f, 5.0f}), std::vector<std::int32_t>{0, 0, 0});
  EXPECT_EQ(res.loss.item(), 0.0f);
  EXPECT_EQ(res.num_valid_tokens, 3);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto res = mt::loss::cross_entropy(Tensor::zeros({2, 4}), std::vector<std::int32_t>{1, 3});
  EXPECT_NEAR(res.loss.item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 20), v = 2 + static_cast<std::int64_t>(rng() % 50);
    Tensor logits = random_tensor({n, v}, rng, -3.0f, 3.0f);
    auto t = random_targets(n, v, 0.2, rng);
    auto res = mt::loss::cross_entropy(logits, t);
    EXPECT_NEAR(res.loss.item(), lse_oracle(logits, t), 1e-6 * std::max(1.0, lse_oracle(logits, t)));
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  double worst = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    auto t = random_targets(4, 5, 0.25, rng);
    auto f = [t](const std::vector<Tensor>& x) { return mt::loss::cross_entropy(x[0], t).loss; };
    worst = std::max(worst, gradcheck(f, {random_tensor({4, 5}, rng)}).max_error);
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(CrossEntropy, NoValidTokensGivesZeroLossAndGradient) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto res = mt::loss::cross_entropy(x, std::vector<std::int32_t>{kIgnoreIndex, kIgnoreIndex});
  EXPECT_EQ(res.loss.item(), 0.0f);
  EXPECT_EQ(res.num_valid_tokens, 0);
  tape.backward(res.loss);
  for (float g : tape.grad(x).to_vector()) EXPECT_EQ(g, 0.0f);
}

TEST(CrossEntropy, TargetOutOfRangeRejected) {
  EXPECT_THROW(mt::loss::cross_entropy(Tensor::zeros({1, 3}), std::vector<std::int32_t>{3}), std::out_of_range);
  EXPECT_THROW(mt::loss::cross_entropy(Tensor::zeros({1, 3}), std::vector<std::int32_t>{-1}), std::out_of_range);
}

TEST(LinearCrossEntropy, AllIgnoredProjectsNothing) {
  auto meter = std::make_shared<mt::MemoryMeter>();
  mt::MemoryScope ms(meter);
  std::mt19937_64 rng(1);
  Tensor h = random_tensor({4, 3}, rng), w = random_tensor({7, 3}, rng);
  mt::loss::LceStats stats;
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor wh = tape.watch(h), ww = tape.watch(w);
  auto res = mt::loss::linear_cross_entropy(wh, ww, std::vector<std::int32_t>(4, kIgnoreIndex), {2, kIgnoreIndex}, &stats);
  EXPECT_EQ(res.loss.item(), 0.0f);
  EXPECT_EQ(stats.projected_rows, 0);
  tape.backward(res.loss);
  for (float g : tape.grad(wh).to_vector()) EXPECT_EQ(g, 0.0f);
  for (float g : tape.grad(ww).to_vector()) EXPECT_EQ(g, 0.0f);
  EXPECT_EQ(meter->snapshot().peak(mt::AllocTag::kLogits), 0);
}

TEST(LinearCrossEntropy, SingleChunkIsBitwiseNaive) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 40);
    Tensor h = random_tensor({n, 6}, rng), w = random_tensor({30, 6}, rng);
    auto t = random_targets(n, 30, 0.3, rng);
    auto a = run_naive(h, w, t);
    auto b = run_lce(h, w, t, n + static_cast<std::int64_t>(rng() % 5));
    EXPECT_EQ(std::memcmp(&a.loss, &b.loss, sizeof(float)), 0);
    EXPECT_EQ(a.dh, b.dh);
    EXPECT_EQ(a.dw, b.dw);
  }
}

TEST(LinearCrossEntropy, AgreesWithNaiveForRandomShapes) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 12; ++i) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 256);
    const std::int64_t v = 2 + static_cast<std::int64_t>(rng() % 4095);
    const std::int64_t e = 4 + static_cast<std::int64_t>(rng() % 12);
    const std::int64_t chunk = 1 + static_cast<std::int64_t>(rng() % 64);
    Tensor h = random_tensor({n, e}, rng), w = random_tensor({v, e}, rng);
    auto t = random_targets(n, v, 0.3, rng);
    auto a = run_naive(h, w, t);
    auto b = run_lce(h, w, t, chunk);
    EXPECT_NEAR(a.loss, b.loss, 1e-5);
    for (std::size_t j = 0; j < a.dh.size(); ++j) EXPECT_NEAR(a.dh[j], b.dh[j], 1e-4 * std::max(1e-3f, std::abs(a.dh[j])));
    for (std::size_t j = 0; j < a.dw.size(); ++j) EXPECT_NEAR(a.dw[j], b.dw[j], 1e-4 * std::max(1e-3f, std::abs(a.dw[j])));
  }
}

TEST(LinearCrossEntropy, ProjectsExactlyTheValidRows) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 100);
    const std::int64_t chunk = 1 + static_cast<std::int64_t>(rng() % 16);
    Tensor h = random_tensor({n, 4}, rng), w = random_tensor({11, 4}, rng);
    auto t = random_targets(n, 11, 0.4, rng);
    mt::loss::LceStats stats;
    auto res = mt::loss::linear_cross_entropy(h, w, t, {chunk, kIgnoreIndex}, &stats);
    EXPECT_EQ(stats.projected_rows, res.num_valid_tokens);
    EXPECT_EQ(stats.chunks, (res.num_valid_tokens + chunk - 1) / chunk);
    EXPECT_LE(stats.peak_logits_bytes, chunk * 11 * 4);
  }
}

TEST(LinearCrossEntropy, LossPhasePeakBelowNaive) {
  std::mt19937_64 rng(4);
  Tensor h = random_tensor({64, 16}, rng), w = random_tensor({1000, 16}, rng);
  auto t = random_targets(64, 1000, 0.0, rng);
  std::int64_t naive_peak, lce_peak, lce_logits_peak;
  {
    auto meter = std::make_shared<mt::MemoryMeter>();
    mt::MemoryScope ms(meter);
    mt::PhaseScope phase("loss");
    Tensor logits = ops::linear(h, w);
    naive_peak = mt::loss::cross_entropy(logits, t).loss_phase_peak_bytes;
  }
  {
    auto meter = std::make_shared<mt::MemoryMeter>();
    mt::MemoryScope ms(meter);
    lce_peak = mt::loss::linear_cross_entropy(h, w, t, {8, kIgnoreIndex}).loss_phase_peak_bytes;
    lce_logits_peak = meter->snapshot().peak(mt::AllocTag::kLogits);
  }
  EXPECT_LT(lce_peak, naive_peak);
  EXPECT_LE(lce_logits_peak, 8 * 1000 * 4);
}

TEST(LinearCrossEntropy, GradientMatchesFiniteDifferences) {
  double worst = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    auto t = random_targets(5, 6, 0.3, rng);
    auto f = [t](const std::vector<Tensor>& x) { return mt::loss::linear_cross_entropy(x[0], x[1], t, {2}).loss; };
    worst = std::max(worst, gradcheck(f, {random_tensor({5, 3}, rng), random_tensor({6, 3}, rng)}).max_error);
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(LinearCrossEntropy, RejectsZeroChunkAndMismatch) {
  EXPECT_THROW(mt::loss::linear_cross_entropy(Tensor::zeros({2, 3}), Tensor::zeros({4, 3}), std::vector<std::int32_t>{0, 1}, {0}),
               std::invalid_argument);
  EXPECT_THROW(mt::loss::linear_cross_entropy(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}), std::vector<std::int32_t>{0, 1}),
               mt::ShapeError);
}

namespace {
struct GrpoCase {
  Tensor now, behavior, mask;
  std::vector<float> adv;
};

GrpoCase grpo_case(std::mt19937_64& rng, std::int64_t g, std::int64_t t, float spread) {
  GrpoCase c;
  c.behavior = random_tensor({g, t}, rng, -3.0f, -0.1f);
  Tensor delta = random_tensor({g, t}, rng, -spread, spread);
  c.now = ops::add(c.behavior, delta);
  std::vector<float> m(static_cast<std::size_t>(g * t));
  std::bernoulli_distribution keep(0.7);
  for (auto& x : m) x = keep(rng) ? 1.0f : 0.0f;
  m[0] = 1.0f;
  c.mask = Tensor({g, t}, std::move(m));
  std::uniform_real_distribution<float> a(-1.5f, 1.5f);
  for (std::int64_t i = 0; i < g; ++i) c.adv.push_back(a(rng));
  return c;
}
}  // namespace

TEST(Grpo, RatioOneGivesNegativeMeanAdvantage) {
  std::mt19937_64 rng(1);
  auto c = grpo_case(rng, 4, 6, 0.0f);
  c.now = c.behavior;
  double sum = 0.0;
  int count = 0;
  for (std::int64_t g = 0; g < 4; ++g) {
    for (std::int64_t t = 0; t < 6; ++t) {
      if (c.mask.data()[g * 6 + t] == 1.0f) {
        sum += c.adv[g];
        ++count;
      }
    }
  }
  EXPECT_NEAR(mt::loss::grpo_objective(c.now, c.behavior, c.adv, c.mask).item(), -sum / count, 1e-6);
}

TEST(Grpo, ZeroAdvantagesGiveZeroLossAndGradient) {
  std::mt19937_64 rng(2);
  auto c = grpo_case(rng, 3, 5, 0.5f);
  std::fill(c.adv.begin(), c.adv.end(), 0.0f);
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor now = tape.watch(c.now);
  Tensor loss = mt::loss::grpo_objective(now, c.behavior, c.adv, c.mask);
  EXPECT_EQ(loss.item(), 0.0f);
  tape.backward(loss);
  for (float g : tape.grad(now).to_vector()) EXPECT_EQ(std::abs(g), 0.0f);
}

TEST(Grpo, InsideClipBandMatchesPolicyGradientOracle) {
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    auto c = grpo_case(rng, 3, 4, 0.1f);  // |log r| < 0.1 keeps r inside [0.8, 1.2]
    double obj = 0.0;
    int count = 0;
    std::vector<double> grad(12, 0.0);
    for (int i = 0; i < 12; ++i) {
      if (c.mask.data()[i] != 1.0f) continue;
      const double r = std::exp(static_cast<double>(c.now.data()[i]) - c.behavior.data()[i]);
      obj += r * c.adv[i / 4];
      grad[i] = r * c.adv[i / 4];
      ++count;
    }
    mt::Tape tape;
    mt::Tape::Scope scope(tape);
    Tensor now = tape.watch(c.now);
    Tensor loss = mt::loss::grpo_objective(now, c.behavior, c.adv, c.mask);
    EXPECT_NEAR(loss.item(), -obj / count, 1e-5);
    tape.backward(loss);
    auto g = tape.grad(now).to_vector();
    for (int i = 0; i < 12; ++i) EXPECT_NEAR(g[i], -grad[i] / count, 1e-5);
  }
}

TEST(Grpo, GradientMatchesFiniteDifferencesAwayFromClipKinks) {
  double worst = 0.0;
  int checked = 0;
  for (int seed = 0; checked < 100; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    auto c = grpo_case(rng, 3, 4, 0.6f);
    bool near_kink = false;
    for (int i = 0; i < 12; ++i) {
      const double lr = c.now.data()[i] - c.behavior.data()[i];
      near_kink = near_kink || std::abs(lr - std::log(0.8)) < 5e-3 || std::abs(lr - std::log(1.2)) < 5e-3;
    }
    if (near_kink) continue;
    ++checked;
    auto f = [&c](const std::vector<Tensor>& x) { return mt::loss::grpo_objective(x[0], x[1], c.adv, c.mask); };
    worst = std::max(worst, gradcheck(f, {c.now, c.behavior}, {true, false}).max_error);
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Grpo, BehaviorLogprobsReceiveNoGradient) {
  std::mt19937_64 rng(5);
  auto c = grpo_case(rng, 2, 3, 0.3f);
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor now = tape.watch(c.now), beh = tape.watch(c.behavior);
  tape.backward(mt::loss::grpo_objective(now, beh, c.adv, c.mask));
  EXPECT_FALSE(tape.grad(beh).defined());
}

TEST(Grpo, EmptyMaskRejected) {
  std::mt19937_64 rng(6);
  auto c = grpo_case(rng, 2, 3, 0.3f);
  EXPECT_THROW(mt::loss::grpo_objective(c.now, c.behavior, c.adv, Tensor::zeros({2, 3})), std::invalid_argument);
}
