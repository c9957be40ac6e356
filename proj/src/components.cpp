// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/components.hpp"

#include <regex>

#include "minitune/models.hpp"

namespace minitune::recipes {

using config::ComponentArgs;
using config::ConfigError;

std::vector<data::InstructSample> apply_split(const std::vector<data::InstructSample>& samples,
                                              const std::string& split) {
  static const std::regex re(R"(train(?:\[\s*(\d*)\s*(%?)\s*:\s*(\d*)\s*(%?)\s*\])?)");
  std::smatch m;
  if (!std::regex_match(split, m, re)) {
    throw ConfigError("unsupported split '" + split + "' (expected train, train[:95%], train[95%:] or train[a:b])");
  }
  const auto n = static_cast<std::int64_t>(samples.size());
  auto bound = [&](const std::string& digits, bool percent, std::int64_t fallback) {
    if (digits.empty()) return fallback;
    const std::int64_t v = std::stoll(digits);
    if (percent && v > 100) throw ConfigError("split '" + split + "' has a percentage above 100");
    return std::min(n, percent ? n * v / 100 : v);
  };
  const std::int64_t lo = bound(m[1].str(), m[2].length() > 0, 0);
  const std::int64_t hi = bound(m[3].str(), m[4].length() > 0, n);
  if (lo > hi) return {};
  return {samples.begin() + lo, samples.begin() + hi};
}

namespace {

models::DecoderArgs decoder_args(const ComponentArgs& a) {
  models::DecoderArgs d;
  d.vocab_size = a.get_int("vocab_size");
  d.num_layers = a.get_int("num_layers");
  d.num_heads = a.get_int("num_heads");
  d.num_kv_heads = a.get_int("num_kv_heads", d.num_heads);
  d.embed_dim = a.get_int("embed_dim");
  d.max_seq_len = a.get_int("max_seq_len");
  d.intermediate_dim = a.get_int("intermediate_dim", 0);
  d.rope_base = a.get_double("rope_base", d.rope_base);
  d.norm_eps = static_cast<float>(a.get_double("norm_eps", d.norm_eps));
  d.attn_dropout = static_cast<float>(a.get_double("attn_dropout", 0.0));
  d.tie_word_embeddings = a.get_bool("tie_word_embeddings", false);
  d.seed = static_cast<std::uint64_t>(a.get_int("seed", 0));
  return d;
}

template <typename F>
auto wrap(const ComponentArgs& a, F f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("component '" + a.component() + "': " + e.what());
  }
}

std::any build_optimizer(const ComponentArgs& a, optim::OptimizerKind kind) {
  OptimizerSpec s;
  s.kind = kind;
  s.hyper.lr = static_cast<float>(a.get_double("lr", s.hyper.lr));
  if (a.given("betas")) {
    const auto& b = a.node("betas");
    if (!b.is_list() || b.items().size() != 2) throw ConfigError("component '" + a.component() + "': betas must be a pair");
    s.hyper.beta1 = static_cast<float>(b.items()[0].as_double());
    s.hyper.beta2 = static_cast<float>(b.items()[1].as_double());
  }
  s.hyper.eps = static_cast<float>(a.get_double("eps", s.hyper.eps));
  s.hyper.weight_decay = static_cast<float>(a.get_double("weight_decay", s.hyper.weight_decay));
  // "fused" selects a multi-tensor kernel upstream; it has no meaning here.
  (void)a.get_bool("fused", false);
  wrap(a, [&] {
    s.hyper.validate();
    return 0;
  });
  return s;
}

std::vector<data::InstructSample> maybe_split(const ComponentArgs& a, std::vector<data::InstructSample> all) {
  return apply_split(all, a.get_string("split", "train"));
}

config::ComponentRegistry make_registry() {
  config::ComponentRegistry r;
  r.add({"minitune.models.llama3", {"vocab_size", "num_layers", "num_heads", "embed_dim", "max_seq_len"},
         {"num_kv_heads", "intermediate_dim", "rope_base", "norm_eps", "attn_dropout", "tie_word_embeddings", "seed"},
         [](const ComponentArgs& a) -> std::any {
           return wrap(a, [&] { return models::llama3(decoder_args(a)); });
         }});
  r.add({"minitune.models.lora_llama3", {"vocab_size", "num_layers", "num_heads", "embed_dim", "max_seq_len"},
         {"num_kv_heads", "intermediate_dim", "rope_base", "norm_eps", "attn_dropout", "tie_word_embeddings", "seed",
          "lora_rank", "lora_alpha", "lora_attn_modules"},
         [](const ComponentArgs& a) -> std::any {
           models::LoraArgs l;
           l.rank = a.get_int("lora_rank", l.rank);
           l.alpha = static_cast<float>(a.get_double("lora_alpha", l.alpha));
           if (a.given("lora_attn_modules")) l.targets = a.get_strings("lora_attn_modules");
           return wrap(a, [&] { return models::lora_llama3(decoder_args(a), l); });
         }});
  r.add({"minitune.optim.AdamW", {}, {"lr", "betas", "eps", "weight_decay", "fused"},
         [](const ComponentArgs& a) { return build_optimizer(a, optim::OptimizerKind::kAdamW); }});
  r.alias("torch.optim.AdamW", "minitune.optim.AdamW");
  r.add({"minitune.optim.AdamW8bit", {}, {"lr", "betas", "eps", "weight_decay", "fused"},
         [](const ComponentArgs& a) { return build_optimizer(a, optim::OptimizerKind::kAdamW8bit); }});
  r.add({"minitune.loss.CrossEntropyLoss", {}, {"ignore_index"}, [](const ComponentArgs& a) -> std::any {
           LossSpec s;
           s.ignore_index = static_cast<std::int32_t>(a.get_int("ignore_index", s.ignore_index));
           return s;
         }});
  r.add({"minitune.loss.LinearCrossEntropyLoss", {}, {"ignore_index", "chunk_size"},
         [](const ComponentArgs& a) -> std::any {
           LossSpec s;
           s.linear = true;
           s.ignore_index = static_cast<std::int32_t>(a.get_int("ignore_index", s.ignore_index));
           s.chunk_size = a.get_int("chunk_size", s.chunk_size);
           if (s.chunk_size < 1) throw ConfigError("component '" + a.component() + "': chunk_size must be >= 1");
           return s;
         }});
  r.add({"minitune.datasets.instruct_dataset", {"source"}, {"split", "packed"}, [](const ComponentArgs& a) -> std::any {
           DatasetSpec s;
           s.split = a.get_string("split", "train");
           s.packed = a.get_bool("packed", false);
           s.samples = maybe_split(a, wrap(a, [&] { return data::load_jsonl_dataset(a.get_string("source")); }));
           return s;
         }});
  r.add({"minitune.datasets.synthetic_instruct_dataset", {"num_samples"}, {"seed", "split", "packed"},
         [](const ComponentArgs& a) -> std::any {
           DatasetSpec s;
           s.split = a.get_string("split", "train");
           s.packed = a.get_bool("packed", false);
           s.samples = maybe_split(a, data::generate_corpus(a.get_int("num_samples"),
                                                            static_cast<std::uint64_t>(a.get_int("seed", 0))));
           return s;
         }});
  r.add({"minitune.data.byte_tokenizer", {}, {"max_seq_len", "path"}, [](const ComponentArgs& a) -> std::any {
           TokenizerSpec s;
           if (a.given("max_seq_len")) {
             s.max_seq_len = a.get_int("max_seq_len");
             if (*s.max_seq_len < 2) throw ConfigError("component '" + a.component() + "': max_seq_len must be >= 2");
           }
           return s;
         }});
  r.add({"minitune.training.Checkpointer", {"output_dir"}, {"save_every_n_steps", "checkpoint_dir", "save_optimizer_state"},
         [](const ComponentArgs& a) -> std::any {
           CheckpointerSpec s;
           s.output_dir = a.get_string("output_dir");
           s.save_every_n_steps = a.get_int("save_every_n_steps", 0);
           s.checkpoint_dir = a.get_string("checkpoint_dir", "");
           s.save_optimizer_state = a.get_bool("save_optimizer_state", true);
           return s;
         }});
  r.add({"minitune.training.CsvLogger", {"log_dir"}, {}, [](const ComponentArgs& a) -> std::any {
           return LoggerSpec{a.get_string("log_dir")};
         }});
  return r;
}

}  // namespace

const config::ComponentRegistry& default_registry() {
  static const config::ComponentRegistry registry = make_registry();
  return registry;
}

}  // namespace minitune::recipes
