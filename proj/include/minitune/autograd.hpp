// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff on an append-only tape.
//
// Ops record a node on the thread's active Tape whenever grad mode is on and
// one of their inputs requires grad. Nodes are appended after their inputs,
// so a reverse sweep over the node list is a valid reverse topological order.
// Parameters enter the tape through a leaf node created at their first use;
// a leaf is finalized (its grad accumulated into Parameter::grad and its
// post-accumulate hook fired) as soon as its last consumer has been
// back-propagated.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "minitune/tensor.hpp"

namespace minitune {

class Parameter;
using GradHook = std::function<void(Parameter&)>;

namespace detail {
class ParameterImpl {
 public:
  std::string name;
  Tensor value;
  Tensor grad;
  GradHook hook;
};
}  // namespace detail

/// Shared handle to a named trainable (or frozen) tensor.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor init, bool trainable = true);

  bool valid() const { return impl_ != nullptr; }
  const std::string& name() const { return impl_->name; }
  void set_name(std::string name) { impl_->name = std::move(name); }

  const Tensor& value() const { return impl_->value; }
  const Shape& shape() const { return impl_->value.shape(); }
  std::int64_t numel() const { return impl_->value.numel(); }
  std::span<float> mutable_data() { return impl_->value.mutable_data(); }
  /// Overwrites the payload in place.
  void assign(std::span<const float> values);
  bool trainable() const { return impl_->value.requires_grad(); }

  bool has_grad() const { return impl_->grad.defined(); }
  const Tensor& grad() const { return impl_->grad; }
  void clear_grad() { impl_->grad = Tensor(); }
  /// Adds `g` into grad, taking ownership of the buffer when grad is empty.
  void accumulate_grad(Tensor g);

  /// At most one hook per parameter; fires once per backward after the
  /// final contribution to grad has been accumulated.
  void register_post_accumulate_grad_hook(GradHook hook);
  bool has_hook() const { return static_cast<bool>(impl_->hook); }
  void remove_hook() { impl_->hook = nullptr; }

  bool same_as(const Parameter& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::ParameterImpl>& impl() const { return impl_; }
  static Parameter from_impl(std::shared_ptr<detail::ParameterImpl> impl);

 private:
  std::shared_ptr<detail::ParameterImpl> impl_;
};

bool grad_enabled();

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// MINITUNE_DETERMINISTIC (default 1). Enables checkpoint replay verification
/// and disables dropout.
bool deterministic_mode();
/// Overrides the environment setting for the rest of the process.
void set_deterministic_mode(bool enabled);

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the recording target of this thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    detail::TapeImpl* previous_;
  };

  /// Back-propagates from a scalar loss with seed gradient 1.
  void backward(const Tensor& loss);
  void backward(const Tensor& output, const Tensor& grad_output);

  /// Returns a copy of `t` registered as a leaf whose gradient is retained.
  Tensor watch(const Tensor& t);
  /// Gradient of a watched leaf after backward; undefined when unreachable.
  Tensor grad(const Tensor& watched) const;

  /// Drops all nodes so the tape can record again.
  void reset();
  std::size_t num_nodes() const;
  bool consumed() const;
  std::uint64_t id() const;

  detail::TapeImpl& impl() { return *impl_; }

 private:
  std::unique_ptr<detail::TapeImpl> impl_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

/// Records `out = op(inputs)` on the active tape. `backward` maps the output
/// gradient to one gradient per input (undefined entries for inputs that do
/// not require grad). Returns `out`, linked to the tape when recorded.
Tensor record_op(std::string_view op, Tensor out, const std::vector<Tensor>& inputs, BackwardFn backward);

using ReplayFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Runs `replay(inputs)` without keeping intermediates. Backward re-runs the
/// replay on a nested tape and back-propagates through it. In deterministic
/// mode a replay whose output differs from the original forward throws.
/// Replays must not construct Parameters.
Tensor checkpoint_segment(ReplayFn replay, std::vector<Tensor> inputs);

}  // namespace minitune
