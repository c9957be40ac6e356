// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/tensor.hpp"

#include <cstring>
#include <sstream>

namespace minitune {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
Storage::Storage(std::vector<float> v, AllocTag tag)
    : values(std::move(v)), tracked(static_cast<std::int64_t>(values.size() * sizeof(float)), tag) {}
}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<float> values, AllocTag tag) : shape_(std::move(shape)) {
  if (numel_of(shape_) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  storage_ = std::make_shared<detail::Storage>(std::move(values), tag);
}

Tensor Tensor::zeros(Shape shape, AllocTag tag) { return full(std::move(shape), 0.0f, tag); }

Tensor Tensor::full(Shape shape, float value, AllocTag tag) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value), tag);
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

std::int64_t Tensor::size(std::int64_t axis) const {
  const auto d = static_cast<std::int64_t>(shape_.size());
  if (axis < 0) axis += d;
  if (axis < 0 || axis >= d) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return storage_ ? static_cast<std::int64_t>(storage_->values.size()) : 0; }

std::span<const float> Tensor::data() const {
  if (!storage_) return {};
  return {storage_->values.data(), storage_->values.size()};
}

std::span<float> Tensor::mutable_data() {
  if (!storage_) return {};
  return {storage_->values.data(), storage_->values.size()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return storage_->values[0];
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

Tensor Tensor::detach() const {
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = shape_;
  return t;
}

Tensor Tensor::clone(AllocTag tag) const {
  if (!storage_) return {};
  return Tensor(shape_, storage_->values, tag);
}

Tensor Tensor::view(Shape shape) const {
  if (numel_of(shape) != numel()) {
    throw ShapeError("view: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = std::move(shape);
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  if (x.size() != y.size()) return false;
  return x.empty() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
}

}  // namespace minitune
