// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Supervised fine-tuning recipe (full and LoRA).
//
// Top-level config keys:
//   model, tokenizer, dataset, optimizer, loss       components (required)
//   checkpointer, metric_logger, dataset_val         components (optional)
//   seed, shuffle, batch_size, epochs, max_steps_per_epoch,
//   gradient_accumulation_steps, clip_grad_norm, optimizer_in_bwd,
//   enable_activation_checkpointing, enable_activation_offloading, compile,
//   dtype, device, resume_from_checkpoint, run_val_every_n_steps,
//   batch_size_val, log_every_n_steps, log_peak_memory_stats, log_level,
//   output_dir, profiler

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "minitune/config.hpp"
#include "minitune/nn.hpp"

namespace minitune::recipes {

struct StepRecord {
  std::int64_t step = 0;  // global optimizer step, from 1
  std::int64_t epoch = 0;
  float loss = 0.0f;      // sum of the scaled micro-batch losses
  std::int64_t tokens = 0;  // non-pad tokens
  std::int64_t label_tokens = 0;
  double wall_ms = 0.0;
  float lr = 0.0f;
  std::int64_t forward_peak = 0;  // total live bytes, per phase
  std::int64_t loss_peak = 0;
  std::int64_t backward_peak = 0;
  std::int64_t optimizer_peak = 0;
  std::int64_t forward_activation_peak = 0;
  std::int64_t gradient_peak = 0;
  std::optional<float> val_loss;
};

struct RunReport {
  std::string recipe;
  std::vector<StepRecord> steps;
  std::int64_t total_tokens = 0;
  std::int64_t total_pad_tokens = 0;
  double total_wall_s = 0.0;
  double tokens_per_second = 0.0;
  std::int64_t peak_bytes = 0;
  std::int64_t optimizer_state_bytes = 0;
  std::int64_t resumed_from_step = 0;
  std::vector<std::string> checkpoints;
  std::vector<std::string> warnings;
  std::shared_ptr<nn::TransformerDecoder> model;

  std::vector<float> losses() const;
  double pad_fraction() const;
};

struct RunOptions {
  std::string recipe = "sft_full";
  /// metrics.csv, summary.txt and config.yaml under output_dir / log_dir.
  bool write_files = true;
  /// Called after every optimizer step.
  std::function<void(const StepRecord&, const nn::TransformerDecoder&)> on_step;
  /// Warnings and periodic log lines; null silences them.
  std::ostream* log = nullptr;
};

/// Runs SFT on a parsed config. Flag conflicts raise config::ConfigError
/// before any training step.
RunReport run_sft(const config::ConfigNode& cfg, const RunOptions& options = {});

/// Seed from MINITUNE_SEED when set, else the config value (null means 0).
std::uint64_t resolve_seed(const config::ConfigNode& cfg);

void write_metrics_csv(const RunReport& report, std::ostream& out);
void write_summary(const RunReport& report, std::ostream& out);

}  // namespace minitune::recipes
