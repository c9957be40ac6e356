// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/nn.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace minitune::nn {

NamedParameters Module::named_parameters() const {
  NamedParameters out;
  collect_parameters("", out);
  return out;
}

std::vector<Parameter> Module::parameters() const {
  std::vector<Parameter> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter> Module::trainable_parameters() const {
  std::vector<Parameter> out;
  for (auto& [name, p] : named_parameters()) {
    if (p.trainable()) out.push_back(p);
  }
  return out;
}

std::int64_t Module::num_parameters() const {
  std::int64_t n = 0;
  for (auto& [name, p] : named_parameters()) n += p.numel();
  return n;
}

// ---------------------------------------------------------------------------

Linear::Linear(Parameter weight) : weight_(std::move(weight)) {
  if (weight_.shape().size() != 2) throw ShapeError("Linear: weight must be [out, in], got " + shape_str(weight_.shape()));
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight_.value()); }

void Linear::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + "weight", weight_);
}

LoRALinear::LoRALinear(Parameter weight, Parameter lora_a, Parameter lora_b, float alpha)
    : weight_(std::move(weight)), lora_a_(std::move(lora_a)), lora_b_(std::move(lora_b)), alpha_(alpha) {
  const auto& w = weight_.shape();
  const auto& a = lora_a_.shape();
  const auto& b = lora_b_.shape();
  if (w.size() != 2 || a.size() != 2 || b.size() != 2 || a[1] != w[1] || b[0] != w[0] || b[1] != a[0]) {
    throw ShapeError("LoRALinear: inconsistent shapes weight " + shape_str(w) + ", lora_a " + shape_str(a) +
                     ", lora_b " + shape_str(b));
  }
  if (alpha <= 0.0f) throw std::invalid_argument("LoRALinear: alpha must be positive");
}

Tensor LoRALinear::forward(const Tensor& x) const {
  Tensor base = ops::linear(x, weight_.value());
  Tensor low = ops::linear(ops::linear(x, lora_a_.value()), lora_b_.value());
  return ops::add(base, ops::mul_scalar(low, scaling()));
}

void LoRALinear::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + "weight", weight_);
  out.emplace_back(prefix + "lora_a.weight", lora_a_);
  out.emplace_back(prefix + "lora_b.weight", lora_b_);
}

Embedding::Embedding(Parameter weight) : weight_(std::move(weight)) {
  if (weight_.shape().size() != 2) throw ShapeError("Embedding: weight must be [V, E], got " + shape_str(weight_.shape()));
}

Tensor Embedding::forward(std::span<const std::int32_t> ids, const Shape& ids_shape) const {
  return ops::embedding(weight_.value(), ids, ids_shape);
}

void Embedding::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + "weight", weight_);
}

RMSNorm::RMSNorm(Parameter scale, float eps) : scale_(std::move(scale)), eps_(eps) {
  if (eps <= 0.0f) throw std::invalid_argument("RMSNorm: eps must be positive");
}

Tensor RMSNorm::forward(const Tensor& x) const { return ops::rms_norm(x, scale_.value(), eps_); }

void RMSNorm::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + "scale", scale_);
}

// ---------------------------------------------------------------------------

Tensor attention_mask(std::int64_t batch, std::int64_t heads, std::int64_t seq, std::span<const std::int32_t> doc_ids) {
  if (!doc_ids.empty() && static_cast<std::int64_t>(doc_ids.size()) != batch * seq) {
    throw ShapeError("attention_mask: expected " + std::to_string(batch * seq) + " doc ids, got " +
                     std::to_string(doc_ids.size()));
  }
  constexpr float kNegInf = -std::numeric_limits<float>::infinity();
  std::vector<float> m(static_cast<std::size_t>(batch * heads * seq * seq));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t i = 0; i < seq; ++i) {
        for (std::int64_t j = 0; j < seq; ++j) {
          bool ok = j <= i;
          if (ok && !doc_ids.empty()) {
            ok = doc_ids[static_cast<std::size_t>(b * seq + i)] == doc_ids[static_cast<std::size_t>(b * seq + j)];
          }
          m[static_cast<std::size_t>(((b * heads + h) * seq + i) * seq + j)] = ok ? 0.0f : kNegInf;
        }
      }
    }
  }
  return Tensor({batch, heads, seq, seq}, std::move(m));
}

MultiHeadAttention::MultiHeadAttention(std::int64_t embed_dim, std::int64_t num_heads, std::int64_t num_kv_heads,
                                       std::int64_t head_dim, std::shared_ptr<LinearLike> q_proj,
                                       std::shared_ptr<LinearLike> k_proj, std::shared_ptr<LinearLike> v_proj,
                                       std::shared_ptr<LinearLike> output_proj,
                                       std::shared_ptr<const ops::RopeTable> rope, float attn_dropout)
    : embed_dim_(embed_dim),
      num_heads_(num_heads),
      num_kv_heads_(num_kv_heads),
      head_dim_(head_dim),
      q_proj_(std::move(q_proj)),
      k_proj_(std::move(k_proj)),
      v_proj_(std::move(v_proj)),
      output_proj_(std::move(output_proj)),
      rope_(std::move(rope)),
      attn_dropout_(attn_dropout) {
  if (embed_dim != num_heads * head_dim) {
    throw std::invalid_argument("MultiHeadAttention: embed_dim " + std::to_string(embed_dim) +
                                " != num_heads * head_dim = " + std::to_string(num_heads * head_dim));
  }
  if (num_kv_heads <= 0 || num_heads % num_kv_heads != 0) {
    throw std::invalid_argument("MultiHeadAttention: num_heads " + std::to_string(num_heads) +
                                " is not divisible by num_kv_heads " + std::to_string(num_kv_heads));
  }
  if (!q_proj_ || !k_proj_ || !v_proj_ || !output_proj_ || !rope_) {
    throw std::invalid_argument("MultiHeadAttention: projections and rope table must be supplied");
  }
  if (q_proj_->out_features() != num_heads * head_dim || k_proj_->out_features() != num_kv_heads * head_dim ||
      v_proj_->out_features() != num_kv_heads * head_dim || output_proj_->in_features() != num_heads * head_dim) {
    throw ShapeError("MultiHeadAttention: projection widths do not match head layout");
  }
  if (rope_->head_dim() != head_dim) throw ShapeError("MultiHeadAttention: rope table head_dim mismatch");
  if (attn_dropout < 0.0f || attn_dropout >= 1.0f) throw std::invalid_argument("attn_dropout must be in [0, 1)");
}

namespace {
std::uint64_t content_seed(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* b = reinterpret_cast<const unsigned char*>(t.data().data());
  for (std::size_t i = 0; i < t.data().size() * sizeof(float); ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace

Tensor MultiHeadAttention::forward(const Tensor& x, std::span<const std::int32_t> positions, const Tensor& mask) const {
  if (x.dim() != 3 || x.size(2) != embed_dim_) {
    throw ShapeError("MultiHeadAttention: expected [B, S, " + std::to_string(embed_dim_) + "], got " + shape_str(x.shape()));
  }
  const auto b = x.size(0);
  const auto s = x.size(1);
  auto heads = [&](const Tensor& t, std::int64_t n) {
    return ops::transpose(ops::reshape(t, {b, s, n, head_dim_}), 1, 2);
  };
  Tensor q = ops::rope(heads(q_proj_->forward(x), num_heads_), positions, *rope_);
  Tensor k = ops::rope(heads(k_proj_->forward(x), num_kv_heads_), positions, *rope_);
  Tensor v = heads(v_proj_->forward(x), num_kv_heads_);
  if (num_kv_heads_ != num_heads_) {
    k = ops::repeat_heads(k, num_heads_ / num_kv_heads_);
    v = ops::repeat_heads(v, num_heads_ / num_kv_heads_);
  }
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim_));
  Tensor scores = ops::add(ops::mul_scalar(ops::matmul(q, ops::transpose(k, 2, 3)), inv_sqrt), mask);
  Tensor probs = ops::softmax(scores);
  if (attn_dropout_ > 0.0f && !deterministic_mode()) probs = ops::dropout(probs, attn_dropout_, content_seed(scores));
  Tensor ctx = ops::reshape(ops::transpose(ops::matmul(probs, v), 1, 2), {b, s, embed_dim_});
  return output_proj_->forward(ctx);
}

void MultiHeadAttention::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  q_proj_->collect_parameters(prefix + "q_proj.", out);
  k_proj_->collect_parameters(prefix + "k_proj.", out);
  v_proj_->collect_parameters(prefix + "v_proj.", out);
  output_proj_->collect_parameters(prefix + "output_proj.", out);
}

FeedForward::FeedForward(std::shared_ptr<LinearLike> w1, std::shared_ptr<LinearLike> w2, std::shared_ptr<LinearLike> w3)
    : w1_(std::move(w1)), w2_(std::move(w2)), w3_(std::move(w3)) {
  if (!w1_ || !w2_ || !w3_) throw std::invalid_argument("FeedForward: projections must be supplied");
  if (w1_->out_features() != w3_->out_features() || w2_->in_features() != w1_->out_features()) {
    throw ShapeError("FeedForward: hidden widths of w1, w2, w3 disagree");
  }
}

Tensor FeedForward::forward(const Tensor& x) const {
  return w2_->forward(ops::mul(ops::silu(w1_->forward(x)), w3_->forward(x)));
}

void FeedForward::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  w1_->collect_parameters(prefix + "w1.", out);
  w2_->collect_parameters(prefix + "w2.", out);
  w3_->collect_parameters(prefix + "w3.", out);
}

TransformerSelfAttentionLayer::TransformerSelfAttentionLayer(std::shared_ptr<MultiHeadAttention> attn,
                                                             std::shared_ptr<FeedForward> mlp,
                                                             std::shared_ptr<RMSNorm> sa_norm,
                                                             std::shared_ptr<RMSNorm> mlp_norm)
    : attn_(std::move(attn)), mlp_(std::move(mlp)), sa_norm_(std::move(sa_norm)), mlp_norm_(std::move(mlp_norm)) {
  if (!attn_ || !mlp_ || !sa_norm_ || !mlp_norm_) {
    throw std::invalid_argument("TransformerSelfAttentionLayer: all submodules must be supplied");
  }
}

Tensor TransformerSelfAttentionLayer::forward(const Tensor& x, std::span<const std::int32_t> positions,
                                              const Tensor& mask) const {
  Tensor h = ops::add(x, attn_->forward(sa_norm_->forward(x), positions, mask));
  return ops::add(h, mlp_->forward(mlp_norm_->forward(h)));
}

void TransformerSelfAttentionLayer::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  attn_->collect_parameters(prefix + "attn.", out);
  mlp_->collect_parameters(prefix + "mlp.", out);
  sa_norm_->collect_parameters(prefix + "sa_norm.", out);
  mlp_norm_->collect_parameters(prefix + "mlp_norm.", out);
}

// ---------------------------------------------------------------------------

TransformerDecoder::TransformerDecoder(std::shared_ptr<Embedding> tok_embeddings,
                                       std::vector<std::shared_ptr<TransformerSelfAttentionLayer>> layers,
                                       std::shared_ptr<RMSNorm> norm, std::shared_ptr<Linear> output,
                                       std::int64_t max_seq_len)
    : tok_embeddings_(std::move(tok_embeddings)),
      layers_(std::move(layers)),
      norm_(std::move(norm)),
      output_(std::move(output)),
      max_seq_len_(max_seq_len) {
  if (!tok_embeddings_ || !norm_) throw std::invalid_argument("TransformerDecoder: embeddings and norm must be supplied");
  if (max_seq_len <= 0) throw std::invalid_argument("TransformerDecoder: max_seq_len must be positive");
  if (output_ && (output_->in_features() != embed_dim() || output_->out_features() != vocab_size())) {
    throw ShapeError("TransformerDecoder: output projection must be [vocab, embed]");
  }
  for (auto& [name, p] : named_parameters()) p.set_name(name);
}

void TransformerDecoder::set_build_args(models::DecoderArgs args, std::optional<models::LoraArgs> lora) {
  args_ = std::move(args);
  lora_args_ = std::move(lora);
}

const Tensor& TransformerDecoder::output_weight() const {
  return output_ ? output_->weight().value() : tok_embeddings_->weight().value();
}

Tensor TransformerDecoder::forward(const DecoderInput& in, const ForwardOptions& options) const {
  const auto b = in.batch;
  const auto s = in.seq;
  if (b <= 0 || s <= 0) throw std::invalid_argument("decoder: batch and sequence length must be positive");
  if (s > max_seq_len_) {
    throw std::invalid_argument("decoder: sequence length " + std::to_string(s) + " exceeds max_seq_len " +
                                std::to_string(max_seq_len_));
  }
  if (static_cast<std::int64_t>(in.tokens.size()) != b * s) {
    throw ShapeError("decoder: expected " + std::to_string(b * s) + " tokens, got " + std::to_string(in.tokens.size()));
  }
  for (auto t : in.tokens) {
    if (t < 0 || t >= vocab_size()) {
      throw std::out_of_range("decoder: token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(vocab_size()));
    }
  }
  std::vector<std::int32_t> positions = in.positions;
  if (positions.empty()) {
    for (std::int64_t i = 0; i < s; ++i) positions.push_back(static_cast<std::int32_t>(i));
  }
  for (auto p : positions) {
    if (p < 0 || p >= max_seq_len_) throw std::out_of_range("decoder: position " + std::to_string(p) + " out of range");
  }

  Tensor h = tok_embeddings_->forward(in.tokens, {b, s});
  if (!layers_.empty()) {
    const Tensor mask = attention_mask(b, layers_.front()->attn().num_heads(), s, in.doc_ids);
    for (const auto& layer : layers_) {
      if (options.activation_checkpointing) {
        h = checkpoint_segment(
            [layer, positions, mask](const std::vector<Tensor>& xs) { return layer->forward(xs[0], positions, mask); },
            {h});
      } else {
        h = layer->forward(h, positions, mask);
      }
    }
  }
  h = norm_->forward(h);
  if (options.return_hidden) return h;
  return ops::linear(h, output_weight());
}

void TransformerDecoder::collect_parameters(const std::string& prefix, NamedParameters& out) const {
  tok_embeddings_->collect_parameters(prefix + "tok_embeddings.", out);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect_parameters(prefix + "layers." + std::to_string(i) + ".", out);
  }
  norm_->collect_parameters(prefix + "norm.", out);
  if (output_) output_->collect_parameters(prefix + "output.", out);
}

Parameter TransformerDecoder::parameter(const std::string& name) const {
  for (auto& [n, p] : named_parameters()) {
    if (n == name) return p;
  }
  throw std::out_of_range("decoder has no parameter named '" + name + "'");
}

}  // namespace minitune::nn
