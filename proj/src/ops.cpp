// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "minitune/kernels.hpp"

namespace minitune::ops {

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::int64_t norm_axis(std::int64_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

// Sums `g` over its leading dimensions down to `target` (a suffix of g's shape).
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const auto inner = numel_of(target);
  std::vector<float> out(static_cast<std::size_t>(inner), 0.0f);
  auto src = g.data();
  const auto outer = g.numel() / std::max<std::int64_t>(inner, 1);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) out[static_cast<std::size_t>(i)] += src[static_cast<std::size_t>(o * inner + i)];
  }
  return Tensor(target, std::move(out));
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  auto src = x.data();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  return Tensor(x.shape(), std::move(out));
}

template <class F>
Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b, F f) {
  const bool b_small = is_suffix(b.shape(), a.shape());
  const bool a_small = !b_small && is_suffix(a.shape(), b.shape());
  if (!b_small && !a_small) shape_fail(op, a.shape(), b.shape());
  const Shape& out_shape = b_small ? a.shape() : b.shape();
  auto x = a.data();
  auto y = b.data();
  const auto n = numel_of(out_shape);
  std::vector<float> out(static_cast<std::size_t>(n));
  if (x.size() == y.size()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  } else if (b_small) {
    const auto m = y.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i % m]);
  } else {
    const auto m = x.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i % m], y[i]);
  }
  return Tensor(out_shape, std::move(out));
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.len = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::int64_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[static_cast<std::size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

// Expands g (shape of x reduced along axis) back to x's shape.
Tensor expand_along(const Tensor& g, const Shape& x_shape, std::int64_t axis, float scale) {
  const auto sp = split_axis(x_shape, axis);
  auto src = g.data();
  std::vector<float> out(static_cast<std::size_t>(numel_of(x_shape)));
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t l = 0; l < sp.len; ++l) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        out[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)] =
            src[static_cast<std::size_t>(o * sp.inner + i)] * scale;
      }
    }
  }
  return Tensor(x_shape, std::move(out));
}

std::int64_t last_dim(const Tensor& x, const char* op) {
  if (x.dim() == 0) throw ShapeError(std::string(op) + ": expected at least 1 dimension");
  return x.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  auto out = broadcast_binary("add", a, b, [](float x, float y) { return x + y; });
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record_op("add", std::move(out), {a, b}, [sa, sb](const Tensor& g) -> std::vector<Tensor> {
    return {reduce_to(g, sa), reduce_to(g, sb)};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto out = broadcast_binary("sub", a, b, [](float x, float y) { return x - y; });
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record_op("sub", std::move(out), {a, b}, [sa, sb](const Tensor& g) -> std::vector<Tensor> {
    return {reduce_to(g, sa), map_unary(reduce_to(g, sb), [](float v) { return -v; })};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto out = broadcast_binary("mul", a, b, [](float x, float y) { return x * y; });
  return record_op("mul", std::move(out), {a, b}, [a = a.detach(), b = b.detach(), ra = a.requires_grad(),
                                                   rb = b.requires_grad()](const Tensor& g) -> std::vector<Tensor> {
    Tensor ga, gb;
    if (ra) ga = reduce_to(broadcast_binary("mul", g, b, [](float x, float y) { return x * y; }), a.shape());
    if (rb) gb = reduce_to(broadcast_binary("mul", g, a, [](float x, float y) { return x * y; }), b.shape());
    return {ga, gb};
  });
}

Tensor add_scalar(const Tensor& x, float s) {
  return record_op("add_scalar", map_unary(x, [s](float v) { return v + s; }), {x},
                   [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

Tensor mul_scalar(const Tensor& x, float s) {
  return record_op("mul_scalar", map_unary(x, [s](float v) { return v * s; }), {x},
                   [s](const Tensor& g) -> std::vector<Tensor> { return {map_unary(g, [s](float v) { return v * s; })}; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0f); }

Tensor exp(const Tensor& x) {
  auto out = map_unary(x, [](float v) { return std::exp(v); });
  return record_op("exp", out, {x}, [y = out.detach()](const Tensor& g) -> std::vector<Tensor> {
    return {broadcast_binary("exp_grad", g, y, [](float a, float b) { return a * b; })};
  });
}

Tensor log(const Tensor& x) {
  return record_op("log", map_unary(x, [](float v) { return std::log(v); }), {x},
                   [x = x.detach()](const Tensor& g) -> std::vector<Tensor> {
                     return {broadcast_binary("log_grad", g, x, [](float a, float b) { return a / b; })};
                   });
}

Tensor pow(const Tensor& x, float exponent) {
  return record_op("pow", map_unary(x, [exponent](float v) { return std::pow(v, exponent); }), {x},
                   [x = x.detach(), exponent](const Tensor& g) -> std::vector<Tensor> {
                     return {broadcast_binary("pow_grad", g, x, [exponent](float a, float b) {
                       return a * exponent * std::pow(b, exponent - 1.0f);
                     })};
                   });
}

Tensor sigmoid(const Tensor& x) {
  auto out = map_unary(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
  return record_op("sigmoid", out, {x}, [y = out.detach()](const Tensor& g) -> std::vector<Tensor> {
    return {broadcast_binary("sigmoid_grad", g, y, [](float a, float s) { return a * s * (1.0f - s); })};
  });
}

Tensor silu(const Tensor& x) {
  auto out = map_unary(x, [](float v) { return v / (1.0f + std::exp(-v)); });
  return record_op("silu", out, {x}, [x = x.detach()](const Tensor& g) -> std::vector<Tensor> {
    return {broadcast_binary("silu_grad", g, x, [](float a, float v) {
      const float s = 1.0f / (1.0f + std::exp(-v));
      return a * (s + v * s * (1.0f - s));
    })};
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  float s = 0.0f;
  for (float v : x.data()) s += v;
  const Shape xs = x.shape();
  return record_op("sum", Tensor::scalar(s), {x}, [xs](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::full(xs, g.item())};
  });
}

Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim) {
  axis = norm_axis(axis, x.dim(), "sum");
  const auto sp = split_axis(x.shape(), axis);
  auto src = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0f);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t l = 0; l < sp.len; ++l) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        out[static_cast<std::size_t>(o * sp.inner + i)] += src[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)];
      }
    }
  }
  const Shape xs = x.shape();
  return record_op("sum_axis", Tensor(reduced_shape(xs, axis, keepdim), std::move(out)), {x},
                   [xs, axis](const Tensor& g) -> std::vector<Tensor> { return {expand_along(g, xs, axis, 1.0f)}; });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return mul_scalar(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim) {
  axis = norm_axis(axis, x.dim(), "mean");
  const auto len = x.shape()[static_cast<std::size_t>(axis)];
  if (len == 0) throw ShapeError("mean: empty axis");
  return mul_scalar(sum(x, axis, keepdim), 1.0f / static_cast<float>(len));
}

Tensor max(const Tensor& x, std::int64_t axis, bool keepdim) {
  axis = norm_axis(axis, x.dim(), "max");
  const auto sp = split_axis(x.shape(), axis);
  if (sp.len == 0) throw ShapeError("max: empty axis");
  auto src = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * sp.inner));
  std::vector<std::int64_t> arg(out.size());
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      std::int64_t best = 0;
      float bv = src[static_cast<std::size_t>(o * sp.len * sp.inner + i)];
      for (std::int64_t l = 1; l < sp.len; ++l) {
        const float v = src[static_cast<std::size_t>((o * sp.len + l) * sp.inner + i)];
        if (v > bv) {
          bv = v;
          best = l;
        }
      }
      out[static_cast<std::size_t>(o * sp.inner + i)] = bv;
      arg[static_cast<std::size_t>(o * sp.inner + i)] = best;
    }
  }
  const Shape xs = x.shape();
  return record_op("max", Tensor(reduced_shape(xs, axis, keepdim), std::move(out)), {x},
                   [xs, sp, arg = std::move(arg)](const Tensor& g) -> std::vector<Tensor> {
                     auto gs = g.data();
                     std::vector<float> dx(static_cast<std::size_t>(numel_of(xs)), 0.0f);
                     for (std::int64_t o = 0; o < sp.outer; ++o) {
                       for (std::int64_t i = 0; i < sp.inner; ++i) {
                         const auto r = static_cast<std::size_t>(o * sp.inner + i);
                         dx[static_cast<std::size_t>((o * sp.len + arg[r]) * sp.inner + i)] = gs[r];
                       }
                     }
                     return {Tensor(xs, std::move(dx))};
                   });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& x) {
  const auto v = last_dim(x, "softmax");
  const auto rows = v == 0 ? 0 : x.numel() / v;
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  auto src = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    kernels::softmax_row(src.subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v)),
                         std::span<float>(out).subspan(static_cast<std::size_t>(r * v), static_cast<std::size_t>(v)));
  }
  Tensor y(x.shape(), std::move(out));
  return record_op("softmax", y, {x}, [y = y.detach(), v, rows](const Tensor& g) -> std::vector<Tensor> {
    auto p = y.data();
    auto gs = g.data();
    std::vector<float> dx(p.size());
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto base = static_cast<std::size_t>(r * v);
      float dot = 0.0f;
      for (std::int64_t j = 0; j < v; ++j) dot += gs[base + j] * p[base + j];
      for (std::int64_t j = 0; j < v; ++j) dx[base + j] = p[base + j] * (gs[base + j] - dot);
    }
    return {Tensor(y.shape(), std::move(dx))};
  });
}

Tensor log_softmax(const Tensor& x) {
  const auto v = last_dim(x, "log_softmax");
  const auto rows = v == 0 ? 0 : x.numel() / v;
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  auto src = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto base = static_cast<std::size_t>(r * v);
    const float lse = kernels::logsumexp(src.subspan(base, static_cast<std::size_t>(v)));
    for (std::int64_t j = 0; j < v; ++j) out[base + j] = src[base + j] - lse;
  }
  Tensor y(x.shape(), std::move(out));
  return record_op("log_softmax", y, {x}, [y = y.detach(), v, rows](const Tensor& g) -> std::vector<Tensor> {
    auto ls = y.data();
    auto gs = g.data();
    std::vector<float> dx(ls.size());
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto base = static_cast<std::size_t>(r * v);
      float total = 0.0f;
      for (std::int64_t j = 0; j < v; ++j) total += gs[base + j];
      for (std::int64_t j = 0; j < v; ++j) dx[base + j] = gs[base + j] - std::exp(ls[base + j]) * total;
    }
    return {Tensor(y.shape(), std::move(dx))};
  });
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) shape_fail("matmul", a.shape(), b.shape());
  const auto m = a.size(-2);
  const auto k = a.size(-1);
  const auto n = b.size(-1);
  if (b.size(-2) != k) shape_fail("matmul", a.shape(), b.shape());
  const bool shared_b = b.dim() == 2;
  Shape lead(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b && Shape(b.shape().begin(), b.shape().end() - 2) != lead) shape_fail("matmul", a.shape(), b.shape());
  const auto batch = numel_of(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(static_cast<std::size_t>(batch * m * n), 0.0f);
  auto x = a.data();
  auto y = b.data();
  for (std::int64_t i = 0; i < batch; ++i) {
    kernels::gemm_nn_acc(m, k, n, x.data() + i * m * k, y.data() + (shared_b ? 0 : i * k * n), out.data() + i * m * n);
  }
  return record_op(
      "matmul", Tensor(out_shape, std::move(out)), {a, b},
      [a = a.detach(), b = b.detach(), ra = a.requires_grad(), rb = b.requires_grad(), m, k, n, batch,
       shared_b](const Tensor& g) -> std::vector<Tensor> {
        auto gs = g.data();
        auto x = a.data();
        auto y = b.data();
        Tensor ga, gb;
        if (ra) {
          std::vector<float> dx(static_cast<std::size_t>(batch * m * k), 0.0f);
          for (std::int64_t i = 0; i < batch; ++i) {
            kernels::gemm_nt(m, n, k, gs.data() + i * m * n, y.data() + (shared_b ? 0 : i * k * n), dx.data() + i * m * k);
          }
          ga = Tensor(a.shape(), std::move(dx));
        }
        if (rb) {
          std::vector<float> dy(static_cast<std::size_t>(b.numel()), 0.0f);
          for (std::int64_t i = 0; i < batch; ++i) {
            kernels::gemm_tn_acc(k, m, n, x.data() + i * m * k, gs.data() + i * m * n, dy.data() + (shared_b ? 0 : i * k * n));
          }
          gb = Tensor(b.shape(), std::move(dy));
        }
        return {ga, gb};
      });
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  if (x.dim() < 1 || weight.dim() != 2 || x.size(-1) != weight.size(1)) {
    shape_fail("linear", x.shape(), weight.shape());
  }
  const auto in = weight.size(1);
  const auto out_f = weight.size(0);
  const auto rows = in == 0 ? 0 : x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<float> out(static_cast<std::size_t>(rows * out_f));
  kernels::gemm_nt(rows, in, out_f, x.data().data(), weight.data().data(), out.data());
  return record_op("linear", Tensor(out_shape, std::move(out)), {x, weight},
                   [x = x.detach(), w = weight.detach(), rx = x.requires_grad(), rw = weight.requires_grad(), rows, in,
                    out_f](const Tensor& g) -> std::vector<Tensor> {
                     Tensor gx, gw;
                     if (rx) {
                       std::vector<float> dx(static_cast<std::size_t>(rows * in), 0.0f);
                       kernels::gemm_nn_acc(rows, out_f, in, g.data().data(), w.data().data(), dx.data());
                       gx = Tensor(x.shape(), std::move(dx));
                     }
                     if (rw) {
                       std::vector<float> dw(static_cast<std::size_t>(out_f * in), 0.0f);
                       kernels::gemm_tn_acc(out_f, rows, in, g.data().data(), x.data().data(), dw.data());
                       gw = Tensor(w.shape(), std::move(dw));
                     }
                     return {gx, gw};
                   });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (weight.dim() != 2) throw ShapeError("embedding: weight must be 2-D, got " + shape_str(weight.shape()));
  if (numel_of(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw ShapeError("embedding: ids shape " + shape_str(ids_shape) + " does not match " + std::to_string(ids.size()) +
                     " ids");
  }
  const auto vocab = weight.size(0);
  const auto e = weight.size(1);
  auto w = weight.data();
  std::vector<float> out(ids.size() * static_cast<std::size_t>(e));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = ids[r];
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab));
    }
    std::copy_n(w.begin() + id * e, e, out.begin() + static_cast<std::ptrdiff_t>(r) * e);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(e);
  return record_op("embedding", Tensor(out_shape, std::move(out)), {weight},
                   [ws = weight.shape(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()),
                    e](const Tensor& g) -> std::vector<Tensor> {
                     std::vector<float> dw(static_cast<std::size_t>(numel_of(ws)), 0.0f);
                     auto gs = g.data();
                     for (std::size_t r = 0; r < ids.size(); ++r) {
                       const auto off = static_cast<std::size_t>(ids[r] * e);
                       for (std::int64_t j = 0; j < e; ++j) dw[off + j] += gs[r * e + j];
                     }
                     return {Tensor(ws, std::move(dw))};
                   });
}

Tensor gather_last(const Tensor& x, std::span<const std::int32_t> idx) {
  const auto v = last_dim(x, "gather_last");
  const auto rows = v == 0 ? 0 : x.numel() / v;
  if (static_cast<std::int64_t>(idx.size()) != rows) {
    throw ShapeError("gather_last: " + std::to_string(idx.size()) + " indices for " + std::to_string(rows) +
                     " rows of " + shape_str(x.shape()));
  }
  auto src = x.data();
  std::vector<float> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto j = idx[static_cast<std::size_t>(r)];
    if (j < 0 || j >= v) throw std::out_of_range("gather_last: index " + std::to_string(j) + " out of range");
    out[static_cast<std::size_t>(r)] = src[static_cast<std::size_t>(r * v + j)];
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  return record_op("gather_last", Tensor(out_shape, std::move(out)), {x},
                   [xs = x.shape(), idx = std::vector<std::int32_t>(idx.begin(), idx.end()), v](const Tensor& g) -> std::vector<Tensor> {
                     std::vector<float> dx(static_cast<std::size_t>(numel_of(xs)), 0.0f);
                     auto gs = g.data();
                     for (std::size_t r = 0; r < idx.size(); ++r) dx[r * v + idx[r]] = gs[r];
                     return {Tensor(xs, std::move(dx))};
                   });
}

// ---------------------------------------------------------------------------
// Layout

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t end) {
  axis = norm_axis(axis, x.dim(), "slice");
  const auto sp = split_axis(x.shape(), axis);
  if (start < 0 || end > sp.len || start > end) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") invalid for axis of size " +
                     std::to_string(sp.len));
  }
  const auto len = end - start;
  auto src = x.data();
  std::vector<float> out(static_cast<std::size_t>(sp.outer * len * sp.inner));
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(src.begin() + (o * sp.len + start) * sp.inner, len * sp.inner, out.begin() + o * len * sp.inner);
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  return record_op("slice", Tensor(out_shape, std::move(out)), {x},
                   [xs = x.shape(), sp, start, len](const Tensor& g) -> std::vector<Tensor> {
                     std::vector<float> dx(static_cast<std::size_t>(numel_of(xs)), 0.0f);
                     auto gs = g.data();
                     for (std::int64_t o = 0; o < sp.outer; ++o) {
                       std::copy_n(gs.begin() + o * len * sp.inner, len * sp.inner, dx.begin() + (o * sp.len + start) * sp.inner);
                     }
                     return {Tensor(xs, std::move(dx))};
                   });
}

Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  axis = norm_axis(axis, xs[0].dim(), "concat");
  Shape out_shape = xs[0].shape();
  std::int64_t total = 0;
  std::vector<std::int64_t> lens;
  for (const auto& t : xs) {
    Shape a = t.shape();
    Shape b = xs[0].shape();
    if (a.size() != b.size()) shape_fail("concat", b, a);
    a[static_cast<std::size_t>(axis)] = 0;
    b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) shape_fail("concat", xs[0].shape(), t.shape());
    lens.push_back(t.shape()[static_cast<std::size_t>(axis)]);
    total += lens.back();
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const auto sp = split_axis(out_shape, axis);
  std::vector<float> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::int64_t offset = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto src = xs[t].data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.begin() + o * lens[t] * sp.inner, lens[t] * sp.inner, out.begin() + (o * total + offset) * sp.inner);
    }
    offset += lens[t];
  }
  return record_op("concat", Tensor(out_shape, std::move(out)), xs,
                   [lens, sp, total, shapes = [&] {
                     std::vector<Shape> s;
                     for (const auto& t : xs) s.push_back(t.shape());
                     return s;
                   }()](const Tensor& g) -> std::vector<Tensor> {
                     std::vector<Tensor> grads;
                     auto gs = g.data();
                     std::int64_t off = 0;
                     for (std::size_t t = 0; t < lens.size(); ++t) {
                       std::vector<float> dx(static_cast<std::size_t>(numel_of(shapes[t])));
                       for (std::int64_t o = 0; o < sp.outer; ++o) {
                         std::copy_n(gs.begin() + (o * total + off) * sp.inner, lens[t] * sp.inner, dx.begin() + o * lens[t] * sp.inner);
                       }
                       grads.emplace_back(shapes[t], std::move(dx));
                       off += lens[t];
                     }
                     return grads;
                   });
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t infer = -1;
  std::int64_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<std::int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) shape_fail("reshape", x.shape(), shape);
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  return record_op("reshape", x.view(shape), {x},
                   [xs = x.shape()](const Tensor& g) -> std::vector<Tensor> { return {g.view(xs)}; });
}

namespace {
Tensor transpose_raw(const Tensor& x, std::int64_t d0, std::int64_t d1) {
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<std::size_t>(d0)], out_shape[static_cast<std::size_t>(d1)]);
  const auto rank = x.dim();
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  std::vector<std::int64_t> strides = in_strides;
  std::swap(strides[static_cast<std::size_t>(d0)], strides[static_cast<std::size_t>(d1)]);
  auto src = x.data();
  std::vector<float> out(src.size());
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t in_off = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = src[static_cast<std::size_t>(in_off)];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      in_off += strides[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return Tensor(out_shape, std::move(out));
}
}  // namespace

Tensor transpose(const Tensor& x, std::int64_t dim0, std::int64_t dim1) {
  dim0 = norm_axis(dim0, x.dim(), "transpose");
  dim1 = norm_axis(dim1, x.dim(), "transpose");
  return record_op("transpose", transpose_raw(x, dim0, dim1), {x},
                   [dim0, dim1](const Tensor& g) -> std::vector<Tensor> { return {transpose_raw(g, dim0, dim1)}; });
}

Tensor repeat_heads(const Tensor& x, std::int64_t n) {
  if (x.dim() != 4 || n < 1) throw ShapeError("repeat_heads: expected [B,H,S,D] input and n >= 1, got " + shape_str(x.shape()));
  if (n == 1) return x;
  const auto b = x.size(0);
  const auto h = x.size(1);
  const auto block = x.size(2) * x.size(3);
  auto src = x.data();
  std::vector<float> out(static_cast<std::size_t>(x.numel() * n));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t hi = 0; hi < h; ++hi) {
      for (std::int64_t r = 0; r < n; ++r) {
        std::copy_n(src.begin() + (bi * h + hi) * block, block, out.begin() + ((bi * h + hi) * n + r) * block);
      }
    }
  }
  Shape out_shape{b, h * n, x.size(2), x.size(3)};
  return record_op("repeat_heads", Tensor(out_shape, std::move(out)), {x},
                   [xs = x.shape(), b, h, n, block](const Tensor& g) -> std::vector<Tensor> {
                     std::vector<float> dx(static_cast<std::size_t>(numel_of(xs)), 0.0f);
                     auto gs = g.data();
                     for (std::int64_t bi = 0; bi < b; ++bi) {
                       for (std::int64_t hi = 0; hi < h; ++hi) {
                         for (std::int64_t r = 0; r < n; ++r) {
                           const auto src_off = ((bi * h + hi) * n + r) * block;
                           const auto dst_off = (bi * h + hi) * block;
                           for (std::int64_t j = 0; j < block; ++j) dx[static_cast<std::size_t>(dst_off + j)] += gs[static_cast<std::size_t>(src_off + j)];
                         }
                       }
                     }
                     return {Tensor(xs, std::move(dx))};
                   });
}

// ---------------------------------------------------------------------------
// Normalization and positional encoding

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("rms_norm: eps must be positive");
  const auto e = last_dim(x, "rms_norm");
  if (weight.shape() != Shape{e}) shape_fail("rms_norm", x.shape(), weight.shape());
  const auto rows = e == 0 ? 0 : x.numel() / e;
  auto src = x.data();
  auto w = weight.data();
  std::vector<float> out(src.size());
  std::vector<float> rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto base = static_cast<std::size_t>(r * e);
    float ss = 0.0f;
    for (std::int64_t j = 0; j < e; ++j) ss += src[base + j] * src[base + j];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(e) + eps);
    rstd[static_cast<std::size_t>(r)] = inv;
    for (std::int64_t j = 0; j < e; ++j) out[base + j] = src[base + j] * inv * w[j];
  }
  return record_op(
      "rms_norm", Tensor(x.shape(), std::move(out)), {x, weight},
      [x = x.detach(), w = weight.detach(), rstd = std::move(rstd), rows, e, rx = x.requires_grad(),
       rw = weight.requires_grad()](const Tensor& g) -> std::vector<Tensor> {
        auto xs = x.data();
        auto ws = w.data();
        auto gs = g.data();
        std::vector<float> dx(rx ? xs.size() : 0);
        std::vector<float> dw(static_cast<std::size_t>(e), 0.0f);
        for (std::int64_t r = 0; r < rows; ++r) {
          const auto base = static_cast<std::size_t>(r * e);
          const float inv = rstd[static_cast<std::size_t>(r)];
          float dot = 0.0f;
          for (std::int64_t j = 0; j < e; ++j) {
            const float xhat = xs[base + j] * inv;
            dw[j] += gs[base + j] * xhat;
            dot += gs[base + j] * ws[j] * xhat;
          }
          if (rx) {
            const float mean_dot = dot / static_cast<float>(e);
            for (std::int64_t j = 0; j < e; ++j) {
              const float xhat = xs[base + j] * inv;
              dx[base + j] = inv * (gs[base + j] * ws[j] - xhat * mean_dot);
            }
          }
        }
        Tensor gx = rx ? Tensor(x.shape(), std::move(dx)) : Tensor();
        Tensor gw = rw ? Tensor(w.shape(), std::move(dw)) : Tensor();
        return {gx, gw};
      });
}

RopeTable::RopeTable(std::int64_t head_dim, std::int64_t max_positions, double base)
    : head_dim_(head_dim), half_(head_dim / 2), max_positions_(max_positions), base_(base) {
  if (head_dim <= 0 || head_dim % 2 != 0) {
    throw std::invalid_argument("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  cos_.resize(static_cast<std::size_t>(max_positions * half_));
  sin_.resize(cos_.size());
  for (std::int64_t p = 0; p < max_positions; ++p) {
    for (std::int64_t i = 0; i < half_; ++i) {
      const double theta = static_cast<double>(p) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      cos_[static_cast<std::size_t>(p * half_ + i)] = static_cast<float>(std::cos(theta));
      sin_[static_cast<std::size_t>(p * half_ + i)] = static_cast<float>(std::sin(theta));
    }
  }
}

namespace {
Tensor rope_raw(const Tensor& x, const std::vector<std::int32_t>& pos, const RopeTable& table, bool inverse) {
  const auto b = x.size(0);
  const auto h = x.size(1);
  const auto s = x.size(2);
  const auto d = x.size(3);
  const bool per_batch = static_cast<std::int64_t>(pos.size()) == b * s;
  auto src = x.data();
  std::vector<float> out(src.size());
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t hi = 0; hi < h; ++hi) {
      for (std::int64_t si = 0; si < s; ++si) {
        const auto p = pos[static_cast<std::size_t>(per_batch ? bi * s + si : si)];
        const auto base = static_cast<std::size_t>(((bi * h + hi) * s + si) * d);
        for (std::int64_t i = 0; i < d / 2; ++i) {
          const float c = table.cos(p, i);
          const float sn = inverse ? -table.sin(p, i) : table.sin(p, i);
          const float x0 = src[base + 2 * i];
          const float x1 = src[base + 2 * i + 1];
          out[base + 2 * i] = x0 * c - x1 * sn;
          out[base + 2 * i + 1] = x0 * sn + x1 * c;
        }
      }
    }
  }
  return Tensor(x.shape(), std::move(out));
}
}  // namespace

Tensor rope(const Tensor& x, std::span<const std::int32_t> positions, const RopeTable& table) {
  if (x.dim() != 4) throw ShapeError("rope: expected [B,H,S,D], got " + shape_str(x.shape()));
  if (x.size(3) != table.head_dim()) {
    throw ShapeError("rope: head_dim " + std::to_string(x.size(3)) + " does not match table " + std::to_string(table.head_dim()));
  }
  const auto s = x.size(2);
  const auto n = static_cast<std::int64_t>(positions.size());
  if (n != s && n != x.size(0) * s) {
    throw ShapeError("rope: expected " + std::to_string(s) + " or " + std::to_string(x.size(0) * s) + " positions, got " +
                     std::to_string(n));
  }
  std::vector<std::int32_t> pos(positions.begin(), positions.end());
  for (auto p : pos) {
    if (p < 0 || p >= table.max_positions()) throw std::out_of_range("rope: position " + std::to_string(p) + " out of range");
  }
  auto out = rope_raw(x, pos, table, false);
  return record_op("rope", std::move(out), {x}, [pos = std::move(pos), &table](const Tensor& g) -> std::vector<Tensor> {
    return {rope_raw(g, pos, table, true)};
  });
}

Tensor rope_apply(const Tensor& x, std::span<const std::int32_t> positions, double base) {
  if (x.dim() != 4) throw ShapeError("rope: expected [B,H,S,D], got " + shape_str(x.shape()));
  std::int32_t max_pos = 0;
  for (auto p : positions) max_pos = std::max(max_pos, p);
  auto table = std::make_shared<RopeTable>(x.size(3), static_cast<std::int64_t>(max_pos) + 1, base);
  if (x.size(3) != table->head_dim()) throw ShapeError("rope: head_dim mismatch");
  std::vector<std::int32_t> pos(positions.begin(), positions.end());
  const auto s = x.size(2);
  if (static_cast<std::int64_t>(pos.size()) != s && static_cast<std::int64_t>(pos.size()) != x.size(0) * s) {
    throw ShapeError("rope: position count does not match sequence length");
  }
  for (auto p : pos) {
    if (p < 0) throw std::out_of_range("rope: negative position");
  }
  auto out = rope_raw(x, pos, *table, false);
  return record_op("rope", std::move(out), {x}, [pos = std::move(pos), table](const Tensor& g) -> std::vector<Tensor> {
    return {rope_raw(g, pos, *table, true)};
  });
}

Tensor dropout(const Tensor& x, float p, std::uint64_t seed) {
  if (p < 0.0f || p >= 1.0f) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0f) return x;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const float scale = 1.0f / (1.0f - p);
  std::vector<float> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = keep(rng) ? scale : 0.0f;
  Tensor m(x.shape(), std::move(mask));
  return mul(x, m);
}

Tensor greater(const Tensor& a, const Tensor& b) {
  return broadcast_binary("greater", a, b, [](float x, float y) { return x > y ? 1.0f : 0.0f; });
}

Tensor less(const Tensor& a, const Tensor& b) {
  return broadcast_binary("less", a, b, [](float x, float y) { return x < y ? 1.0f : 0.0f; });
}

}  // namespace minitune::ops
