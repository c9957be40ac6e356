// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/models.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace minitune::models {

namespace {

constexpr float kInitStd = 0.02f;
constexpr std::uint64_t kLoraStream = 0x6c6f72615f615f31ull;

void validate(const DecoderArgs& a) {
  auto positive = [](std::int64_t v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string("decoder: ") + what + " must be positive, got " + std::to_string(v));
  };
  positive(a.vocab_size, "vocab_size");
  positive(a.num_layers, "num_layers");
  positive(a.num_heads, "num_heads");
  positive(a.num_kv_heads, "num_kv_heads");
  positive(a.embed_dim, "embed_dim");
  positive(a.max_seq_len, "max_seq_len");
  if (a.intermediate_dim < 0) throw std::invalid_argument("decoder: intermediate_dim must be non-negative");
  if (a.embed_dim % a.num_heads != 0) {
    throw std::invalid_argument("decoder: embed_dim " + std::to_string(a.embed_dim) + " is not divisible by num_heads " +
                                std::to_string(a.num_heads));
  }
  if (a.num_heads % a.num_kv_heads != 0) {
    throw std::invalid_argument("decoder: num_heads " + std::to_string(a.num_heads) +
                                " is not divisible by num_kv_heads " + std::to_string(a.num_kv_heads));
  }
  if ((a.embed_dim / a.num_heads) % 2 != 0) {
    throw std::invalid_argument("decoder: head_dim " + std::to_string(a.embed_dim / a.num_heads) + " must be even");
  }
  if (!(a.norm_eps > 0.0f)) throw std::invalid_argument("decoder: norm_eps must be positive");
}

Tensor normal(const Shape& shape, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

std::string canonical_target(const std::string& t) {
  static const std::set<std::string> kValid = {"q", "k", "v", "output"};
  std::string s = t;
  if (s.size() > 5 && s.ends_with("_proj")) s = s.substr(0, s.size() - 5);
  if (!kValid.contains(s)) {
    throw std::invalid_argument("lora: unknown target '" + t + "' (expected a subset of q, k, v, output)");
  }
  return s;
}

struct Builder {
  const DecoderArgs& args;
  const LoraArgs* lora;
  std::set<std::string> targets;
  std::mt19937_64 rng;
  std::mt19937_64 lora_rng;

  Builder(const DecoderArgs& a, const LoraArgs* l) : args(a), lora(l), rng(a.seed), lora_rng(a.seed ^ kLoraStream) {
    if (lora) {
      if (lora->rank < 1) throw std::invalid_argument("lora: rank must be >= 1");
      if (lora->targets.empty()) throw std::invalid_argument("lora: target set must be non-empty");
      for (const auto& t : lora->targets) targets.insert(canonical_target(t));
    }
  }

  bool base_trainable() const { return lora == nullptr; }

  Parameter dense(std::int64_t out, std::int64_t in) {
    return Parameter("", normal({out, in}, rng, kInitStd), base_trainable());
  }

  std::shared_ptr<nn::LinearLike> projection(const std::string& target, std::int64_t out, std::int64_t in) {
    Parameter w = dense(out, in);
    if (!targets.contains(target)) return std::make_shared<nn::Linear>(std::move(w));
    if (lora->rank > std::min(in, out)) {
      throw std::invalid_argument("lora: rank " + std::to_string(lora->rank) + " exceeds min(in, out) = " +
                                  std::to_string(std::min(in, out)) + " for " + target + "_proj");
    }
    const float a_std = 1.0f / static_cast<float>(lora->rank);
    Parameter a("", normal({lora->rank, in}, lora_rng, a_std));
    Parameter b("", Tensor::zeros({out, lora->rank}));
    return std::make_shared<nn::LoRALinear>(std::move(w), std::move(a), std::move(b), lora->alpha);
  }

  std::shared_ptr<nn::RMSNorm> norm() {
    return std::make_shared<nn::RMSNorm>(Parameter("", Tensor::full({args.embed_dim}, 1.0f), base_trainable()),
                                         args.norm_eps);
  }

  std::shared_ptr<nn::TransformerDecoder> build() {
    validate(args);
    const auto e = args.embed_dim;
    const auto head_dim = e / args.num_heads;
    const auto kv_dim = args.num_kv_heads * head_dim;
    const auto hidden = args.intermediate_dim > 0 ? args.intermediate_dim : default_intermediate_dim(e);
    auto rope = std::make_shared<const ops::RopeTable>(head_dim, args.max_seq_len, args.rope_base);

    auto tok = std::make_shared<nn::Embedding>(
        Parameter("", normal({args.vocab_size, e}, rng, kInitStd), base_trainable()));
    std::vector<std::shared_ptr<nn::TransformerSelfAttentionLayer>> layers;
    for (std::int64_t i = 0; i < args.num_layers; ++i) {
      auto q = projection("q", e, e);
      auto k = projection("k", kv_dim, e);
      auto v = projection("v", kv_dim, e);
      auto o = projection("output", e, e);
      auto attn = std::make_shared<nn::MultiHeadAttention>(e, args.num_heads, args.num_kv_heads, head_dim, q, k, v, o,
                                                           rope, args.attn_dropout);
      auto w1 = std::make_shared<nn::Linear>(dense(hidden, e));
      auto w2 = std::make_shared<nn::Linear>(dense(e, hidden));
      auto w3 = std::make_shared<nn::Linear>(dense(hidden, e));
      auto mlp = std::make_shared<nn::FeedForward>(w1, w2, w3);
      layers.push_back(std::make_shared<nn::TransformerSelfAttentionLayer>(attn, mlp, norm(), norm()));
    }
    auto final_norm = norm();
    std::shared_ptr<nn::Linear> output;
    if (!args.tie_word_embeddings) output = std::make_shared<nn::Linear>(dense(args.vocab_size, e));
    auto decoder = std::make_shared<nn::TransformerDecoder>(tok, std::move(layers), final_norm, output, args.max_seq_len);
    decoder->set_build_args(args, lora ? std::optional<LoraArgs>(*lora) : std::nullopt);
    return decoder;
  }
};

}  // namespace

std::int64_t default_intermediate_dim(std::int64_t embed_dim) {
  const auto scaled = static_cast<std::int64_t>(std::llround(8.0 * static_cast<double>(embed_dim) / 3.0));
  return (scaled + 7) / 8 * 8;
}

std::shared_ptr<nn::TransformerDecoder> llama3(const DecoderArgs& args) { return Builder(args, nullptr).build(); }

std::shared_ptr<nn::TransformerDecoder> lora_llama3(const DecoderArgs& args, const LoraArgs& lora) {
  return Builder(args, &lora).build();
}

void copy_parameters(const nn::TransformerDecoder& src, nn::TransformerDecoder& dst) {
  auto dst_named = dst.named_parameters();
  for (auto& [name, p] : src.named_parameters()) {
    auto it = std::find_if(dst_named.begin(), dst_named.end(), [&](const auto& kv) { return kv.first == name; });
    if (it == dst_named.end()) throw std::invalid_argument("copy_parameters: destination lacks '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("copy_parameters: shape mismatch for '" + name + "': " + shape_str(p.shape()) + " vs " +
                       shape_str(it->second.shape()));
    }
    it->second.assign(p.value().data());
  }
}

std::shared_ptr<nn::TransformerDecoder> clone_decoder(const nn::TransformerDecoder& decoder) {
  auto copy = decoder.lora_args() ? lora_llama3(decoder.args(), *decoder.lora_args()) : llama3(decoder.args());
  copy_parameters(decoder, *copy);
  return copy;
}

std::shared_ptr<nn::TransformerDecoder> merge_lora(const nn::TransformerDecoder& decoder) {
  auto merged = llama3(decoder.args());
  auto dense = merged->named_parameters();
  auto lookup = [&](const std::string& name) -> Parameter& {
    for (auto& [n, p] : dense) {
      if (n == name) return p;
    }
    throw std::invalid_argument("merge_lora: dense decoder lacks '" + name + "'");
  };
  for (auto& [name, p] : decoder.named_parameters()) {
    if (name.find(".lora_") != std::string::npos) continue;
    lookup(name).assign(p.value().data());
  }
  for (std::size_t i = 0; i < decoder.num_layers(); ++i) {
    const auto& attn = decoder.layer(i).attn();
    const std::pair<const char*, const nn::LinearLike*> projections[] = {
        {"q_proj", &attn.q_proj()}, {"k_proj", &attn.k_proj()}, {"v_proj", &attn.v_proj()},
        {"output_proj", &attn.output_proj()}};
    for (const auto& [pname, proj] : projections) {
      const auto* lora = dynamic_cast<const nn::LoRALinear*>(proj);
      if (lora == nullptr) continue;
      const auto out = lora->out_features();
      const auto in = lora->in_features();
      const auto r = lora->rank();
      const float scaling = lora->scaling();
      auto w = lora->weight().value().data();
      auto a = lora->lora_a().value().data();
      auto b = lora->lora_b().value().data();
      std::vector<float> merged_w(w.begin(), w.end());
      for (std::int64_t o = 0; o < out; ++o) {
        for (std::int64_t j = 0; j < in; ++j) {
          float acc = 0.0f;
          for (std::int64_t k = 0; k < r; ++k) acc += b[static_cast<std::size_t>(o * r + k)] * a[static_cast<std::size_t>(k * in + j)];
          merged_w[static_cast<std::size_t>(o * in + j)] += scaling * acc;
        }
      }
      lookup("layers." + std::to_string(i) + ".attn." + pname + ".weight").assign(merged_w);
    }
  }
  return merged;
}

}  // namespace minitune::models
