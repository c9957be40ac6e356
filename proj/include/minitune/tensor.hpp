// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f32 tensors. Row-major, immutable after creation except through
// mutable_data() on a buffer the caller owns (parameters, fresh results).

#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "minitune/memory.hpp"

namespace minitune {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
class ParameterImpl;
class TapeImpl;

struct Storage {
  Storage(std::vector<float> values, AllocTag tag);
  std::vector<float> values;
  TrackedBytes tracked;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, AllocTag tag = AllocTag::kActivation);

  static Tensor zeros(Shape shape, AllocTag tag = AllocTag::kActivation);
  static Tensor full(Shape shape, float value, AllocTag tag = AllocTag::kActivation);
  static Tensor scalar(float value);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.size(); }
  /// Size along `axis`; negative axes count from the end.
  std::int64_t size(std::int64_t axis) const;
  std::int64_t numel() const;
  std::int64_t nbytes() const { return numel() * static_cast<std::int64_t>(sizeof(float)); }

  std::span<const float> data() const;
  /// Writable view of the payload. Only valid on buffers nobody else reads
  /// concurrently (fresh op results, parameter values under the optimizer).
  std::span<float> mutable_data();
  float item() const;
  std::vector<float> to_vector() const;

  bool requires_grad() const { return requires_grad_; }
  /// Same payload, cut from the tape.
  Tensor detach() const;
  /// Deep copy with no autograd link.
  Tensor clone(AllocTag tag = AllocTag::kActivation) const;
  /// Number of owners of the payload buffer.
  long use_count() const { return storage_.use_count(); }
  bool shares_storage_with(const Tensor& other) const { return storage_ == other.storage_; }

  std::int64_t node_id() const { return node_; }

  /// Same payload under a new shape of equal numel, with no autograd link.
  Tensor view(Shape shape) const;

 private:
  friend class Parameter;
  friend class detail::TapeImpl;
  friend class Tape;

  std::shared_ptr<detail::Storage> storage_;
  Shape shape_;
  bool requires_grad_ = false;
  std::int64_t node_ = -1;
  std::uint64_t tape_id_ = 0;
  std::weak_ptr<detail::ParameterImpl> param_;
};

/// Bitwise comparison of shape and payload.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace minitune
