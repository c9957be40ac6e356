// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks. Modules never construct their children: every
// submodule is built by a builder (see models.hpp) and handed in, so swapping
// a dense projection for a LoRA one is a builder change only.

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minitune/autograd.hpp"
#include "minitune/model_args.hpp"
#include "minitune/ops.hpp"

namespace minitune::nn {

using NamedParameters = std::vector<std::pair<std::string, Parameter>>;

class Module {
 public:
  virtual ~Module() = default;
  /// Appends (prefix + local name, parameter) in a fixed order.
  virtual void collect_parameters(const std::string& prefix, NamedParameters& out) const = 0;
  NamedParameters named_parameters() const;
  std::vector<Parameter> parameters() const;
  std::vector<Parameter> trainable_parameters() const;
  std::int64_t num_parameters() const;
};

class LinearLike : public Module {
 public:
  virtual Tensor forward(const Tensor& x) const = 0;
  virtual std::int64_t in_features() const = 0;
  virtual std::int64_t out_features() const = 0;
};

/// y = x · weightᵀ, weight [out, in]. No bias.
class Linear final : public LinearLike {
 public:
  explicit Linear(Parameter weight);
  Tensor forward(const Tensor& x) const override;
  std::int64_t in_features() const override { return weight_.shape()[1]; }
  std::int64_t out_features() const override { return weight_.shape()[0]; }
  const Parameter& weight() const { return weight_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  Parameter weight_;
};

/// y = x · Wᵀ + (alpha / rank) · (x · Aᵀ) · Bᵀ with W frozen.
class LoRALinear final : public LinearLike {
 public:
  LoRALinear(Parameter weight, Parameter lora_a, Parameter lora_b, float alpha);
  Tensor forward(const Tensor& x) const override;
  std::int64_t in_features() const override { return weight_.shape()[1]; }
  std::int64_t out_features() const override { return weight_.shape()[0]; }
  std::int64_t rank() const { return lora_a_.shape()[0]; }
  float alpha() const { return alpha_; }
  float scaling() const { return alpha_ / static_cast<float>(rank()); }
  const Parameter& weight() const { return weight_; }
  const Parameter& lora_a() const { return lora_a_; }
  const Parameter& lora_b() const { return lora_b_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  Parameter weight_;
  Parameter lora_a_;
  Parameter lora_b_;
  float alpha_;
};

class Embedding final : public Module {
 public:
  explicit Embedding(Parameter weight);
  Tensor forward(std::span<const std::int32_t> ids, const Shape& ids_shape) const;
  std::int64_t num_embeddings() const { return weight_.shape()[0]; }
  std::int64_t embedding_dim() const { return weight_.shape()[1]; }
  const Parameter& weight() const { return weight_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  Parameter weight_;
};

class RMSNorm final : public Module {
 public:
  RMSNorm(Parameter scale, float eps);
  Tensor forward(const Tensor& x) const;
  float eps() const { return eps_; }
  const Parameter& scale() const { return scale_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  Parameter scale_;
  float eps_;
};

/// Additive mask [B, H, S, S]: 0 where query i may attend key j (j <= i and,
/// when doc_ids is given, same document), -inf elsewhere.
Tensor attention_mask(std::int64_t batch, std::int64_t heads, std::int64_t seq, std::span<const std::int32_t> doc_ids);

class MultiHeadAttention final : public Module {
 public:
  MultiHeadAttention(std::int64_t embed_dim, std::int64_t num_heads, std::int64_t num_kv_heads, std::int64_t head_dim,
                     std::shared_ptr<LinearLike> q_proj, std::shared_ptr<LinearLike> k_proj,
                     std::shared_ptr<LinearLike> v_proj, std::shared_ptr<LinearLike> output_proj,
                     std::shared_ptr<const ops::RopeTable> rope, float attn_dropout = 0.0f);

  /// x: [B, S, E]; positions: S or B*S entries; mask from attention_mask().
  Tensor forward(const Tensor& x, std::span<const std::int32_t> positions, const Tensor& mask) const;

  std::int64_t num_heads() const { return num_heads_; }
  std::int64_t num_kv_heads() const { return num_kv_heads_; }
  std::int64_t head_dim() const { return head_dim_; }
  const LinearLike& q_proj() const { return *q_proj_; }
  const LinearLike& k_proj() const { return *k_proj_; }
  const LinearLike& v_proj() const { return *v_proj_; }
  const LinearLike& output_proj() const { return *output_proj_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  std::int64_t embed_dim_;
  std::int64_t num_heads_;
  std::int64_t num_kv_heads_;
  std::int64_t head_dim_;
  std::shared_ptr<LinearLike> q_proj_;
  std::shared_ptr<LinearLike> k_proj_;
  std::shared_ptr<LinearLike> v_proj_;
  std::shared_ptr<LinearLike> output_proj_;
  std::shared_ptr<const ops::RopeTable> rope_;
  float attn_dropout_;
};

/// w2(silu(w1 x) * w3 x).
class FeedForward final : public Module {
 public:
  FeedForward(std::shared_ptr<LinearLike> w1, std::shared_ptr<LinearLike> w2, std::shared_ptr<LinearLike> w3);
  Tensor forward(const Tensor& x) const;
  const LinearLike& w1() const { return *w1_; }
  const LinearLike& w2() const { return *w2_; }
  const LinearLike& w3() const { return *w3_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  std::shared_ptr<LinearLike> w1_;
  std::shared_ptr<LinearLike> w2_;
  std::shared_ptr<LinearLike> w3_;
};

class TransformerSelfAttentionLayer final : public Module {
 public:
  TransformerSelfAttentionLayer(std::shared_ptr<MultiHeadAttention> attn, std::shared_ptr<FeedForward> mlp,
                                std::shared_ptr<RMSNorm> sa_norm, std::shared_ptr<RMSNorm> mlp_norm);
  Tensor forward(const Tensor& x, std::span<const std::int32_t> positions, const Tensor& mask) const;
  const MultiHeadAttention& attn() const { return *attn_; }
  const FeedForward& mlp() const { return *mlp_; }
  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;

 private:
  std::shared_ptr<MultiHeadAttention> attn_;
  std::shared_ptr<FeedForward> mlp_;
  std::shared_ptr<RMSNorm> sa_norm_;
  std::shared_ptr<RMSNorm> mlp_norm_;
};

struct DecoderInput {
  std::int64_t batch = 1;
  std::int64_t seq = 0;
  std::vector<std::int32_t> tokens;     // B*S
  std::vector<std::int32_t> positions;  // empty -> 0..S-1 for every row
  std::vector<std::int32_t> doc_ids;    // empty -> one document per row
};

struct ForwardOptions {
  bool return_hidden = false;
  bool activation_checkpointing = false;
};

class TransformerDecoder final : public Module {
 public:
  /// `output` may be null when the embedding table is tied to the output.
  TransformerDecoder(std::shared_ptr<Embedding> tok_embeddings,
                     std::vector<std::shared_ptr<TransformerSelfAttentionLayer>> layers, std::shared_ptr<RMSNorm> norm,
                     std::shared_ptr<Linear> output, std::int64_t max_seq_len);

  /// [B, S, V] logits, or [B, S, E] final-norm hidden states with return_hidden.
  Tensor forward(const DecoderInput& input, const ForwardOptions& options = {}) const;

  /// Weight [V, E] of the output projection (the embedding table when tied).
  const Tensor& output_weight() const;
  bool tied() const { return output_ == nullptr; }
  std::int64_t vocab_size() const { return tok_embeddings_->num_embeddings(); }
  std::int64_t embed_dim() const { return tok_embeddings_->embedding_dim(); }
  std::int64_t max_seq_len() const { return max_seq_len_; }
  std::size_t num_layers() const { return layers_.size(); }
  const TransformerSelfAttentionLayer& layer(std::size_t i) const { return *layers_.at(i); }

  void collect_parameters(const std::string& prefix, NamedParameters& out) const override;
  Parameter parameter(const std::string& name) const;

  /// Builder arguments that produced this decoder, used to clone or merge it.
  const models::DecoderArgs& args() const { return args_; }
  const std::optional<models::LoraArgs>& lora_args() const { return lora_args_; }
  void set_build_args(models::DecoderArgs args, std::optional<models::LoraArgs> lora);

 private:
  std::shared_ptr<Embedding> tok_embeddings_;
  std::vector<std::shared_ptr<TransformerSelfAttentionLayer>> layers_;
  std::shared_ptr<RMSNorm> norm_;
  std::shared_ptr<Linear> output_;
  std::int64_t max_seq_len_;
  models::DecoderArgs args_;
  std::optional<models::LoraArgs> lora_args_;
};

}  // namespace minitune::nn
