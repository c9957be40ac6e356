// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Built-in components available to recipe configs.
//
//   minitune.models.llama3 / minitune.models.lora_llama3  -> shared_ptr<TransformerDecoder>
//   minitune.optim.AdamW (alias torch.optim.AdamW)        -> OptimizerSpec
//   minitune.optim.AdamW8bit                              -> OptimizerSpec
//   minitune.loss.CrossEntropyLoss                        -> LossSpec
//   minitune.loss.LinearCrossEntropyLoss                  -> LossSpec
//   minitune.datasets.instruct_dataset                    -> DatasetSpec
//   minitune.datasets.synthetic_instruct_dataset          -> DatasetSpec
//   minitune.data.byte_tokenizer                          -> TokenizerSpec
//   minitune.training.Checkpointer                        -> CheckpointerSpec
//   minitune.training.CsvLogger                           -> LoggerSpec

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minitune/config.hpp"
#include "minitune/data.hpp"
#include "minitune/loss.hpp"
#include "minitune/nn.hpp"
#include "minitune/optim.hpp"

namespace minitune::recipes {

struct OptimizerSpec {
  optim::OptimizerKind kind = optim::OptimizerKind::kAdamW;
  optim::AdamWHyper hyper;
  bool operator==(const OptimizerSpec& o) const {
    return kind == o.kind && hyper.lr == o.hyper.lr && hyper.beta1 == o.hyper.beta1 && hyper.beta2 == o.hyper.beta2 &&
           hyper.eps == o.hyper.eps && hyper.weight_decay == o.hyper.weight_decay;
  }
};

struct LossSpec {
  bool linear = false;  // fused projection + cross-entropy
  std::int64_t chunk_size = 256;
  std::int32_t ignore_index = loss::kIgnoreIndex;
  bool operator==(const LossSpec&) const = default;
};

struct DatasetSpec {
  std::vector<data::InstructSample> samples;
  bool packed = false;
  std::string split = "train";
  bool operator==(const DatasetSpec&) const = default;
};

struct TokenizerSpec {
  std::optional<std::int64_t> max_seq_len;
  bool operator==(const TokenizerSpec&) const = default;
};

struct CheckpointerSpec {
  std::string output_dir;
  std::int64_t save_every_n_steps = 0;  // 0: only at the end of training
  std::string checkpoint_dir;           // source for resume_from_checkpoint
  bool save_optimizer_state = true;
  bool operator==(const CheckpointerSpec&) const = default;
};

struct LoggerSpec {
  std::string log_dir;
  bool operator==(const LoggerSpec&) const = default;
};

/// Applies a split expression: "train", "train[:95%]", "train[95%:]",
/// "train[10:20]". Percent bounds round down.
std::vector<data::InstructSample> apply_split(const std::vector<data::InstructSample>& samples,
                                              const std::string& split);

const config::ComponentRegistry& default_registry();

}  // namespace minitune::recipes
