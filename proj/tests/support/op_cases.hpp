// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded input generators for every differentiable primitive.

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "minitune/ops.hpp"
#include "support/gradcheck.hpp"

namespace minitune::testing {

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  std::vector<bool> differentiable = {};
};

inline Shape small_shape(std::mt19937_64& rng, std::size_t rank) {
  std::uniform_int_distribution<std::int64_t> d(1, 4);
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(d(rng));
  return s;
}

// Values spaced at least 0.05 apart so a perturbation of 1e-3 never changes the argmax.
inline Tensor separated(const Shape& shape, std::mt19937_64& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  std::iota(v.begin(), v.end(), 0.0f);
  std::shuffle(v.begin(), v.end(), rng);
  for (auto& x : v) x = x * 0.05f - 0.5f;
  return Tensor(shape, std::move(v));
}

inline std::vector<OpCase> op_cases() {
  static const std::vector<std::int32_t> kIds = {2, 0, 2, 1, 3};
  static const ops::RopeTable kTable(4, 16, 10000.0);
  std::vector<OpCase> cases;
  cases.push_back({"add", [](auto& r) { auto s = small_shape(r, 3); return std::vector{random_tensor(s, r), random_tensor(s, r)}; },
                   [](const auto& x) { return ops::add(x[0], x[1]); }});
  cases.push_back({"add_broadcast",
                   [](auto& r) {
                     auto s = small_shape(r, 3);
                     return std::vector{random_tensor(s, r), random_tensor(Shape(s.begin() + 1, s.end()), r)};
                   },
                   [](const auto& x) { return ops::add(x[0], x[1]); }});
  cases.push_back({"sub_broadcast",
                   [](auto& r) {
                     auto s = small_shape(r, 3);
                     return std::vector{random_tensor(Shape(s.begin() + 2, s.end()), r), random_tensor(s, r)};
                   },
                   [](const auto& x) { return ops::sub(x[0], x[1]); }});
  cases.push_back({"mul_broadcast",
                   [](auto& r) {
                     auto s = small_shape(r, 3);
                     return std::vector{random_tensor(s, r), random_tensor(Shape(s.begin() + 1, s.end()), r)};
                   },
                   [](const auto& x) { return ops::mul(x[0], x[1]); }});
  cases.push_back({"add_scalar", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::add_scalar(x[0], 0.7f); }});
  cases.push_back({"mul_scalar", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::mul_scalar(x[0], -1.3f); }});
  cases.push_back({"neg", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::neg(x[0]); }});
  cases.push_back({"exp", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::exp(x[0]); }});
  cases.push_back({"log", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r, 0.2f, 1.0f)}; },
                   [](const auto& x) { return ops::log(x[0]); }});
  cases.push_back({"pow_fractional", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r, 0.2f, 1.0f)}; },
                   [](const auto& x) { return ops::pow(x[0], 1.7f); }});
  cases.push_back({"pow_cube", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::pow(x[0], 3.0f); }});
  cases.push_back({"sigmoid", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::sigmoid(x[0]); }});
  cases.push_back({"silu", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::silu(x[0]); }});
  cases.push_back({"sum_axis", [](auto& r) { return std::vector{random_tensor(small_shape(r, 3), r)}; },
                   [](const auto& x) { return ops::sum(x[0], 1); }});
  cases.push_back({"mean_all", [](auto& r) { return std::vector{random_tensor(small_shape(r, 3), r)}; },
                   [](const auto& x) { return ops::mean(x[0]); }});
  cases.push_back({"mean_axis_keepdim", [](auto& r) { return std::vector{random_tensor(small_shape(r, 3), r)}; },
                   [](const auto& x) { return ops::mean(x[0], -1, true); }});
  cases.push_back({"max_axis", [](auto& r) { return std::vector{separated(small_shape(r, 3), r)}; },
                   [](const auto& x) { return ops::max(x[0], 1); }});
  cases.push_back({"softmax", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::softmax(x[0]); }});
  cases.push_back({"log_softmax", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::log_softmax(x[0]); }});
  cases.push_back({"matmul_batched",
                   [](auto& r) {
                     auto s = small_shape(r, 4);
                     return std::vector{random_tensor({s[0], s[1], s[2]}, r), random_tensor({s[0], s[2], s[3]}, r)};
                   },
                   [](const auto& x) { return ops::matmul(x[0], x[1]); }});
  cases.push_back({"matmul_shared_rhs",
                   [](auto& r) {
                     auto s = small_shape(r, 4);
                     return std::vector{random_tensor({s[0], s[1], s[2]}, r), random_tensor({s[2], s[3]}, r)};
                   },
                   [](const auto& x) { return ops::matmul(x[0], x[1]); }});
  cases.push_back({"linear",
                   [](auto& r) {
                     auto s = small_shape(r, 3);
                     return std::vector{random_tensor({2, s[0], s[1]}, r), random_tensor({s[2], s[1]}, r)};
                   },
                   [](const auto& x) { return ops::linear(x[0], x[1]); }});
  cases.push_back({"embedding", [](auto& r) { return std::vector{random_tensor({4, 3}, r)}; },
                   [](const auto& x) { return ops::embedding(x[0], kIds, {5}); }});
  cases.push_back({"gather_last", [](auto& r) { return std::vector{random_tensor({5, 4}, r)}; },
                   [](const auto& x) { return ops::gather_last(x[0], kIds); }});
  cases.push_back({"slice", [](auto& r) { return std::vector{random_tensor({3, 5, 2}, r)}; },
                   [](const auto& x) { return ops::slice(x[0], 1, 1, 4); }});
  cases.push_back({"concat",
                   [](auto& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 1}, r), random_tensor({2, 2}, r)}; },
                   [](const auto& x) { return ops::concat({x[0], x[1], x[2]}, 1); }});
  cases.push_back({"reshape", [](auto& r) { return std::vector{random_tensor({2, 3, 4}, r)}; },
                   [](const auto& x) { return ops::reshape(x[0], {4, -1}); }});
  cases.push_back({"transpose", [](auto& r) { return std::vector{random_tensor(small_shape(r, 4), r)}; },
                   [](const auto& x) { return ops::transpose(x[0], 1, 3); }});
  cases.push_back({"repeat_heads", [](auto& r) { return std::vector{random_tensor({2, 2, 3, 2}, r)}; },
                   [](const auto& x) { return ops::repeat_heads(x[0], 3); }});
  cases.push_back({"rms_norm",
                   [](auto& r) {
                     // Feature width >= 4: with E = 1 the op is sign(x) smoothed over sqrt(eps) ~ h.
                     Shape s{std::uniform_int_distribution<std::int64_t>(1, 4)(r), std::uniform_int_distribution<std::int64_t>(4, 8)(r)};
                     return std::vector{random_tensor(s, r), random_tensor({s[1]}, r)};
                   },
                   [](const auto& x) { return ops::rms_norm(x[0], x[1], 1e-5f); }});
  cases.push_back({"rope", [](auto& r) { return std::vector{random_tensor({2, 2, 3, 4}, r)}; },
                   [](const auto& x) {
                     static const std::vector<std::int32_t> pos = {0, 5, 11};
                     return ops::rope(x[0], pos, kTable);
                   }});
  cases.push_back({"dropout", [](auto& r) { return std::vector{random_tensor(small_shape(r, 2), r)}; },
                   [](const auto& x) { return ops::dropout(x[0], 0.3f, 42); }});
  return cases;
}

}  // namespace minitune::testing
