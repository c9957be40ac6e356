// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW, blockwise 8-bit AdamW and the in-backward wrapper that applies each
// parameter's update from its post-accumulate grad hook.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minitune/autograd.hpp"
#include "minitune/memory.hpp"
#include "minitune/nn.hpp"

namespace minitune::optim {

struct AdamWHyper {
  float lr = 2e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

enum class OptimizerKind { kAdamW, kAdamW8bit };
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct AdamWState {
  Tensor m;
  Tensor v;
  std::int64_t step_count = 0;
};

/// Decoupled decay first (theta *= 1 - lr*wd), then the bias-corrected Adam
/// update. Throws on a non-finite gradient, naming the parameter.
void adamw_step(Parameter& param, const Tensor& grad, AdamWState& state, const AdamWHyper& hyper);

inline constexpr std::int64_t kQuantBlock = 256;

/// Linear absmax code per block of kQuantBlock elements. Signed moments keep
/// int8 bit patterns in the byte buffer, so zero is always code 0.
class QuantizedMoment {
 public:
  QuantizedMoment() = default;
  QuantizedMoment(std::int64_t numel, bool is_signed);

  /// Unsigned moments round up so a positive value never decodes to zero.
  void quantize(std::span<const float> values);
  void dequantize(std::span<float> out) const;

  std::int64_t numel() const { return numel_; }
  bool is_signed() const { return signed_; }
  std::int64_t num_blocks() const { return static_cast<std::int64_t>(scales_.size()); }
  std::int64_t payload_bytes() const;
  const std::vector<std::uint8_t>& codes() const { return codes_; }
  const std::vector<float>& scales() const { return scales_; }
  void load(std::vector<std::uint8_t> codes, std::vector<float> scales);

 private:
  std::int64_t numel_ = 0;
  bool signed_ = true;
  std::vector<std::uint8_t> codes_;
  std::vector<float> scales_;
  TrackedBytes tracked_;
};

/// First moment stored signed; the second moment is stored as sqrt(v),
/// unsigned, which keeps its dynamic range inside 8 bits.
struct AdamW8bitState {
  QuantizedMoment m;
  QuantizedMoment sqrt_v;
  std::int64_t step_count = 0;
};

void adamw8bit_step(Parameter& param, const Tensor& grad, AdamW8bitState& state, const AdamWHyper& hyper);

struct StateBuffer {
  std::string dtype;  // "f32" or "u8"
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
};

struct ParamStateRecord {
  std::int64_t step = 0;
  std::map<std::string, StateBuffer> buffers;
};

struct OptimizerStateDict {
  std::string optimizer;
  std::map<std::string, ParamStateRecord> params;
};

/// State for one parameter, created lazily at its first update.
class ParamOptimizer {
 public:
  ParamOptimizer(Parameter param, OptimizerKind kind);
  void step(const Tensor& grad, const AdamWHyper& hyper);
  const Parameter& param() const { return param_; }
  std::int64_t step_count() const;
  std::int64_t state_bytes() const;
  ParamStateRecord save() const;
  void load(const ParamStateRecord& record);

 private:
  Parameter param_;
  OptimizerKind kind_;
  std::optional<AdamWState> full_;
  std::optional<AdamW8bitState> quant_;
};

/// Standard optimizer over the trainable parameters it is given.
class Optimizer {
 public:
  Optimizer(const nn::NamedParameters& params, AdamWHyper hyper, OptimizerKind kind = OptimizerKind::kAdamW);

  /// Updates every parameter holding a gradient.
  void step();
  void zero_grad();
  void set_lr(float lr) { hyper_.lr = lr; }
  float lr() const { return hyper_.lr; }
  const AdamWHyper& hyper() const { return hyper_; }
  OptimizerKind kind() const { return kind_; }
  std::int64_t state_bytes() const;

  OptimizerStateDict state_dict() const;
  void load_state_dict(const OptimizerStateDict& state);

 private:
  AdamWHyper hyper_;
  OptimizerKind kind_;
  std::vector<ParamOptimizer> slots_;
};

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Parameter>& params, double max_norm);

/// One optimizer instance per parameter, stepped from that parameter's grad
/// hook. There is no global step(); the learning rate is read by each hook
/// from the value set before backward.
class InBackwardOptimizer {
 public:
  static std::unique_ptr<InBackwardOptimizer> attach(const nn::NamedParameters& params, AdamWHyper hyper,
                                                     OptimizerKind kind = OptimizerKind::kAdamW,
                                                     std::int64_t gradient_accumulation_steps = 1);
  ~InBackwardOptimizer();
  InBackwardOptimizer(const InBackwardOptimizer&) = delete;
  InBackwardOptimizer& operator=(const InBackwardOptimizer&) = delete;

  void set_lr(float lr) { hyper_.lr = lr; }
  float lr() const { return hyper_.lr; }
  OptimizerKind kind() const { return kind_; }
  std::int64_t updates_applied() const { return updates_; }
  std::int64_t state_bytes() const;

  OptimizerStateDict state_dict() const;
  void load_state_dict(const OptimizerStateDict& state);

 private:
  InBackwardOptimizer(AdamWHyper hyper, OptimizerKind kind) : hyper_(hyper), kind_(kind) {}

  AdamWHyper hyper_;
  OptimizerKind kind_;
  std::vector<std::unique_ptr<ParamOptimizer>> slots_;
  std::int64_t updates_ = 0;
};

}  // namespace minitune::optim
