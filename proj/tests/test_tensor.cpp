// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <thread>

#include "minitune/autograd.hpp"
#include "minitune/memory.hpp"
#include "minitune/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

namespace mt = minitune;
namespace ops = minitune::ops;
using mt::Shape;
using mt::Tensor;
using mt::testing::gradcheck;
using mt::testing::random_tensor;
using mt::testing::op_cases;
using mt::testing::separated;
using mt::testing::small_shape;
using mt::testing::weighted_sum;

namespace {

constexpr int kSeeds = 100;
constexpr double kTol = 1e-3;

}  // namespace

TEST(Primitives, MatmulIdentity) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_TRUE(mt::bitwise_equal(ops::matmul(eye, x), x));
}

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  auto p = ops::softmax(Tensor({3}, {0, 0, 0})).to_vector();
  for (float v : p) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(Primitives, SumOfProductGradientIsOtherFactor) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor wa = tape.watch(a);
  tape.backward(ops::sum(ops::mul(wa, b)));
  EXPECT_TRUE(mt::bitwise_equal(tape.grad(wa), b));
}

TEST(Primitives, ShapeErrorNamesOpAndShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const mt::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), mt::ShapeError);
}

TEST(Primitives, ComparisonMasksNeverRequireGrad) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor a = tape.watch(Tensor({3}, {1, 2, 3}));
  Tensor m = ops::greater(a, Tensor({3}, {2, 2, 2}));
  EXPECT_FALSE(m.requires_grad());
  EXPECT_EQ(m.to_vector(), (std::vector<float>{0, 0, 1}));
  EXPECT_EQ(ops::less(a, Tensor({3}, {2, 2, 2})).to_vector(), (std::vector<float>{1, 0, 0}));
}

TEST(Primitives, NoGradInputsAreNotRecorded) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor y = ops::exp(Tensor({2}, {0, 1}));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.num_nodes(), 0u);
}

TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : op_cases()) {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
      auto inputs = c.make_inputs(rng);
      Tensor probe;
      {
        mt::NoGradGuard ng;
        probe = c.op(inputs);
      }
      auto f = weighted_sum(c.op, probe.shape(), static_cast<std::uint64_t>(seed));
      worst = std::max(worst, gradcheck(f, inputs, c.differentiable).max_error);
    }
    EXPECT_LT(worst, kTol) << c.name;
  }
}

TEST(Backward, LinearCase) {
  mt::Parameter theta("theta", Tensor({3}, {0.5f, -1.0f, 2.0f}));
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  tape.backward(ops::sum(theta.value()));
  EXPECT_EQ(theta.grad().to_vector(), (std::vector<float>{1, 1, 1}));
}

TEST(Backward, SquareCase) {
  mt::Parameter theta("theta", Tensor({2}, {1, 2}));
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  tape.backward(ops::sum(ops::mul(theta.value(), theta.value())));
  EXPECT_EQ(theta.grad().to_vector(), (std::vector<float>{2, 4}));
}

TEST(Backward, RejectsSecondCallAndNonScalarLoss) {
  mt::Parameter theta("theta", Tensor({2}, {1, 2}));
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor y = ops::mul_scalar(theta.value(), 2.0f);
  EXPECT_THROW(tape.backward(y), mt::ShapeError);
  Tensor loss = ops::sum(y);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
  tape.reset();
  theta.clear_grad();
  tape.backward(ops::sum(ops::mul_scalar(theta.value(), 3.0f)));
  EXPECT_EQ(theta.grad().to_vector(), (std::vector<float>{3, 3}));
}

TEST(Backward, GradientsAccumulateAcrossBackwardCalls) {
  mt::Parameter theta("theta", Tensor({2}, {1, 2}));
  for (int i = 0; i < 2; ++i) {
    mt::Tape tape;
    mt::Tape::Scope scope(tape);
    tape.backward(ops::sum(theta.value()));
  }
  EXPECT_EQ(theta.grad().to_vector(), (std::vector<float>{2, 2}));
}

namespace {

struct Mlp {
  mt::Parameter w1, w2;
  explicit Mlp(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    w1 = mt::Parameter("w1", random_tensor({5, 3}, rng));
    w2 = mt::Parameter("w2", random_tensor({2, 5}, rng));
  }
  Tensor loss(const Tensor& x) const {
    Tensor h = ops::silu(ops::linear(x, w1.value()));
    return ops::mean(ops::pow(ops::linear(h, w2.value()), 2.0f));
  }
};

}  // namespace

TEST(Backward, TwoLayerMlpMatchesFiniteDifferencesOnEveryParameter) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Mlp mlp(static_cast<std::uint64_t>(seed));
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 1000);
    Tensor x = random_tensor({4, 3}, rng);
    {
      mt::Tape tape;
      mt::Tape::Scope scope(tape);
      tape.backward(mlp.loss(x));
    }
    mt::NoGradGuard ng;
    for (mt::Parameter* p : {&mlp.w1, &mlp.w2}) {
      auto analytic = p->grad().to_vector();
      for (std::size_t j = 0; j < analytic.size(); ++j) {
        const float orig = p->value().data()[j];
        p->mutable_data()[j] = orig + 1e-3f;
        const double up = mlp.loss(x).item();
        p->mutable_data()[j] = orig - 1e-3f;
        const double down = mlp.loss(x).item();
        p->mutable_data()[j] = orig;
        const double numeric = (up - down) / 2e-3;
        const double scale = std::max({1.0, std::abs(numeric), static_cast<double>(std::abs(analytic[j]))});
        EXPECT_LT(std::abs(numeric - analytic[j]) / scale, kTol) << p->name() << "[" << j << "] seed " << seed;
      }
    }
  }
}

TEST(Backward, IntermediateGradientBuffersAreReleased) {
  auto meter = std::make_shared<mt::MemoryMeter>();
  mt::MemoryScope ms(meter);
  Mlp mlp(1);
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({4, 3}, rng);
  const auto before = meter->snapshot().live_bytes;
  {
    mt::Tape tape;
    mt::Tape::Scope scope(tape);
    Tensor loss = mlp.loss(x);
    tape.backward(loss);
    const auto grad_bytes = (mlp.w1.numel() + mlp.w2.numel()) * 4;
    // Only the loss scalar (still referenced here) and the parameter grads survive.
    EXPECT_EQ(meter->snapshot().live_bytes - before, grad_bytes + 4);
  }
}

TEST(Hooks, FiresOncePerBackward) {
  mt::Parameter theta("theta", Tensor({2}, {1, 2}));
  int calls = 0;
  theta.register_post_accumulate_grad_hook([&](mt::Parameter&) { ++calls; });
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  tape.backward(ops::sum(theta.value()));
  EXPECT_EQ(calls, 1);
}

TEST(Hooks, FanOutFiresOnceWithSummedGradient) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    Tensor init = random_tensor({3, 3}, rng);
    Tensor x = random_tensor({2, 3}, rng);
    auto build = [&](const mt::Parameter& p) {
      Tensor h = ops::linear(x, p.value());
      Tensor h2 = ops::linear(ops::sigmoid(h), p.value());
      return ops::sum(ops::mul(h2, ops::exp(ops::sum(p.value(), 0))));
    };
    mt::Parameter plain("w", init);
    mt::Parameter hooked("w", init);
    int calls = 0;
    std::vector<float> seen;
    hooked.register_post_accumulate_grad_hook([&](mt::Parameter& p) {
      ++calls;
      seen = p.grad().to_vector();
    });
    for (auto* p : {&plain, &hooked}) {
      mt::Tape tape;
      mt::Tape::Scope scope(tape);
      tape.backward(build(*p));
    }
    EXPECT_EQ(calls, 1);
    EXPECT_EQ(seen, plain.grad().to_vector());
  }
}

TEST(Hooks, HookMayConsumeGradient) {
  mt::Parameter theta("theta", Tensor({2}, {1, 2}));
  theta.register_post_accumulate_grad_hook([](mt::Parameter& p) { p.clear_grad(); });
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  tape.backward(ops::sum(ops::mul(theta.value(), theta.value())));
  EXPECT_FALSE(theta.has_grad());
}

TEST(Hooks, SecondRegistrationRejected) {
  mt::Parameter theta("theta", Tensor({1}, {1}));
  theta.register_post_accumulate_grad_hook([](mt::Parameter&) {});
  EXPECT_THROW(theta.register_post_accumulate_grad_hook([](mt::Parameter&) {}), std::logic_error);
}

TEST(Checkpoint, IdentitySegmentPassesGradientThrough) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor({3}, {1, 2, 3}));
  Tensor y = mt::checkpoint_segment([](const std::vector<Tensor>& in) { return in[0]; }, {x});
  EXPECT_EQ(y.to_vector(), x.to_vector());
  tape.backward(ops::sum(ops::mul_scalar(y, 2.0f)));
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<float>{2, 2, 2}));
}

TEST(Checkpoint, GradientsBitwiseEqualToPlainExecution) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    Tensor init1 = random_tensor({6, 4}, rng);
    Tensor init2 = random_tensor({4, 6}, rng);
    Tensor x0 = random_tensor({3, 4}, rng);
    std::vector<std::vector<float>> grads[2];
    for (int ac = 0; ac < 2; ++ac) {
      mt::Parameter w1("w1", init1), w2("w2", init2);
      auto block = [&](const std::vector<Tensor>& in) {
        Tensor h = ops::silu(ops::linear(in[0], w1.value()));
        return ops::add(in[0], ops::linear(h, w2.value()));
      };
      mt::Tape tape;
      mt::Tape::Scope scope(tape);
      Tensor x = tape.watch(x0);
      Tensor h = ac ? mt::checkpoint_segment(block, {x}) : block({x});
      h = ac ? mt::checkpoint_segment(block, {h}) : block({h});
      tape.backward(ops::sum(ops::mul(h, h)));
      grads[ac] = {w1.grad().to_vector(), w2.grad().to_vector(), tape.grad(x).to_vector()};
    }
    for (std::size_t i = 0; i < 3; ++i) {
      ASSERT_EQ(grads[0][i].size(), grads[1][i].size());
      EXPECT_EQ(0, std::memcmp(grads[0][i].data(), grads[1][i].data(), grads[0][i].size() * sizeof(float)));
    }
  }
}

TEST(Checkpoint, HookFiresOnceForParameterUsedInsideAndOutside) {
  mt::Parameter w("w", Tensor({2, 2}, {1, 2, 3, 4}));
  int calls = 0;
  w.register_post_accumulate_grad_hook([&](mt::Parameter&) { ++calls; });
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor({1, 2}, {1, -1}));
  Tensor h = mt::checkpoint_segment([&](const std::vector<Tensor>& in) { return ops::linear(in[0], w.value()); }, {x});
  tape.backward(ops::sum(ops::linear(h, w.value())));
  EXPECT_EQ(calls, 1);
}

TEST(Checkpoint, ReplayMustNotConstructParameters) {
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor({1}, {1}));
  EXPECT_THROW(mt::checkpoint_segment(
                   [](const std::vector<Tensor>& in) {
                     mt::Parameter p("bad", Tensor({1}, {1}));
                     return ops::mul(in[0], p.value());
                   },
                   {x}),
               std::logic_error);
}

TEST(Checkpoint, NonDeterministicReplayDetected) {
  mt::set_deterministic_mode(true);
  mt::Tape tape;
  mt::Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor({1}, {1}));
  int calls = 0;
  Tensor y = mt::checkpoint_segment(
      [&](const std::vector<Tensor>& in) { return ops::mul_scalar(in[0], static_cast<float>(++calls)); }, {x});
  EXPECT_THROW(tape.backward(ops::sum(y)), std::runtime_error);
}

TEST(Memory, EmptyRegionReportsZero) {
  mt::MemoryScope ms(std::make_shared<mt::MemoryMeter>());
  auto snap = mt::memory_report();
  EXPECT_EQ(snap.live_bytes, 0);
  EXPECT_EQ(snap.peak_bytes, 0);
}

TEST(Memory, FourBytesPerElement) {
  mt::MemoryScope ms(std::make_shared<mt::MemoryMeter>());
  Tensor t = Tensor::zeros({1024});
  EXPECT_EQ(mt::memory_report().live_bytes, 4096);
  EXPECT_EQ(mt::memory_report().live(mt::AllocTag::kActivation), 4096);
}

TEST(Memory, LiveBytesReturnAfterTapeReset) {
  auto meter = std::make_shared<mt::MemoryMeter>();
  mt::MemoryScope ms(meter);
  Mlp mlp(5);
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({4, 3}, rng);
  const auto before = meter->snapshot().live_bytes;
  mt::Tape tape;
  {
    mt::Tape::Scope scope(tape);
    Tensor loss = mlp.loss(x);
    EXPECT_GT(meter->snapshot().live_bytes, before);
  }
  tape.reset();
  EXPECT_EQ(meter->snapshot().live_bytes, before);
}

TEST(Memory, PeaksAreMonotoneAndPhasesTracked) {
  auto meter = std::make_shared<mt::MemoryMeter>();
  mt::MemoryScope ms(meter);
  std::int64_t last_peak = 0;
  for (int i = 1; i <= 5; ++i) {
    mt::PhaseScope phase(i % 2 ? "forward" : "loss");
    Tensor t = Tensor::zeros({i * 10});
    auto snap = meter->snapshot();
    EXPECT_GE(snap.peak_bytes, last_peak);
    last_peak = snap.peak_bytes;
  }
  auto snap = meter->snapshot();
  EXPECT_EQ(snap.phase_peak("forward"), 200);
  EXPECT_EQ(snap.phase_peak("loss"), 160);
  EXPECT_EQ(snap.live_bytes, 0);
}

TEST(Memory, FreesOnOtherThreadsAreCounted) {
  auto meter = std::make_shared<mt::MemoryMeter>();
  Tensor t;
  {
    mt::MemoryScope ms(meter);
    t = Tensor::zeros({8});
  }
  std::thread([moved = std::move(t)]() mutable { moved = Tensor(); }).join();
  EXPECT_EQ(meter->snapshot().live_bytes, 0);
}
