// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "minitune/autograd.hpp"
#include "minitune/checkpoint.hpp"
#include "minitune/components.hpp"
#include "minitune/data.hpp"
#include "minitune/loss.hpp"
#include "minitune/memory.hpp"
#include "minitune/models.hpp"
#include "minitune/ops.hpp"
#include "minitune/optim.hpp"
#include "minitune/recipes.hpp"

namespace minitune::recipes {

using config::ConfigError;
using config::ConfigNode;

std::vector<float> RunReport::losses() const {
  std::vector<float> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.loss);
  return out;
}

double RunReport::pad_fraction() const {
  const std::int64_t all = total_tokens + total_pad_tokens;
  return all == 0 ? 0.0 : static_cast<double>(total_pad_tokens) / static_cast<double>(all);
}

namespace {

const std::set<std::string> kKnownKeys = {
    "model", "tokenizer", "dataset", "optimizer", "loss", "checkpointer", "metric_logger", "dataset_val", "seed",
    "shuffle", "batch_size", "epochs", "max_steps_per_epoch", "gradient_accumulation_steps", "clip_grad_norm",
    "optimizer_in_bwd", "enable_activation_checkpointing", "enable_activation_offloading", "compile", "dtype", "device",
    "resume_from_checkpoint", "run_val_every_n_steps", "batch_size_val", "log_every_n_steps", "log_peak_memory_stats",
    "log_level", "output_dir", "profiler"};

const ConfigNode* value_of(const ConfigNode& cfg, const std::string& key) {
  const ConfigNode* n = cfg.find(key);
  return n == nullptr || n->is_null() ? nullptr : n;
}

template <typename F>
auto typed(const std::string& key, F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::optional<std::int64_t> opt_int(const ConfigNode& cfg, const std::string& key) {
  const ConfigNode* n = value_of(cfg, key);
  if (!n) return std::nullopt;
  return typed(key, [&] { return n->as_int(); });
}

std::optional<double> opt_double(const ConfigNode& cfg, const std::string& key) {
  const ConfigNode* n = value_of(cfg, key);
  if (!n) return std::nullopt;
  return typed(key, [&] { return n->as_double(); });
}

bool flag(const ConfigNode& cfg, const std::string& key, bool fallback) {
  const ConfigNode* n = value_of(cfg, key);
  if (!n) return fallback;
  return typed(key, [&] { return n->as_bool(); });
}

std::string text(const ConfigNode& cfg, const std::string& key, const std::string& fallback) {
  const ConfigNode* n = value_of(cfg, key);
  if (!n) return fallback;
  return typed(key, [&] { return n->as_string(); });
}

template <typename T>
T build(const ConfigNode& cfg, const std::string& key, const char* kind) {
  const ConfigNode* n = value_of(cfg, key);
  if (!n) throw ConfigError("missing required config section '" + key + "'");
  if (!n->is_component()) throw ConfigError("config section '" + key + "' must set _component_");
  std::any built = config::instantiate(*n, default_registry());
  if (auto* p = std::any_cast<T>(&built)) return *p;
  throw ConfigError("config section '" + key + "': component '" + n->component() + "' does not build a " + kind);
}

struct Settings {
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::int64_t batch_size = 1;
  std::int64_t batch_size_val = 1;
  std::int64_t epochs = 1;
  std::optional<std::int64_t> max_steps_per_epoch;
  std::int64_t grad_accum = 1;
  std::optional<double> clip_grad_norm;
  bool fused = false;
  bool activation_checkpointing = false;
  bool resume = false;
  std::optional<std::int64_t> val_every;
  std::int64_t log_every = 1;
  std::string output_dir;
};

Settings read_settings(const ConfigNode& cfg, std::vector<std::string>& warnings) {
  Settings s;
  s.seed = resolve_seed(cfg);
  s.shuffle = flag(cfg, "shuffle", true);
  s.batch_size = opt_int(cfg, "batch_size").value_or(1);
  s.batch_size_val = opt_int(cfg, "batch_size_val").value_or(s.batch_size);
  s.epochs = opt_int(cfg, "epochs").value_or(1);
  s.max_steps_per_epoch = opt_int(cfg, "max_steps_per_epoch");
  s.grad_accum = opt_int(cfg, "gradient_accumulation_steps").value_or(1);
  s.clip_grad_norm = opt_double(cfg, "clip_grad_norm");
  s.fused = flag(cfg, "optimizer_in_bwd", false);
  s.activation_checkpointing = flag(cfg, "enable_activation_checkpointing", false);
  s.resume = flag(cfg, "resume_from_checkpoint", false);
  s.val_every = opt_int(cfg, "run_val_every_n_steps");
  s.log_every = opt_int(cfg, "log_every_n_steps").value_or(1);
  s.output_dir = text(cfg, "output_dir", "");

  if (s.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (s.batch_size_val < 1) throw ConfigError("batch_size_val must be >= 1");
  if (s.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (s.max_steps_per_epoch && *s.max_steps_per_epoch < 1) throw ConfigError("max_steps_per_epoch must be >= 1");
  if (s.grad_accum < 1) throw ConfigError("gradient_accumulation_steps must be >= 1");
  if (s.clip_grad_norm && !(*s.clip_grad_norm > 0.0)) throw ConfigError("clip_grad_norm must be positive");
  if (s.val_every && *s.val_every < 1) throw ConfigError("run_val_every_n_steps must be >= 1");
  if (s.log_every < 1) throw ConfigError("log_every_n_steps must be >= 1");

  if (s.fused && s.grad_accum != 1) {
    throw ConfigError("optimizer_in_bwd requires gradient_accumulation_steps == 1 (got " +
                      std::to_string(s.grad_accum) + ")");
  }
  if (s.fused && s.clip_grad_norm) {
    throw ConfigError("optimizer_in_bwd cannot be combined with clip_grad_norm: parameters are updated before the "
                      "global norm is known");
  }
  if (flag(cfg, "enable_activation_offloading", false)) {
    throw ConfigError("enable_activation_offloading is not supported on the host backend");
  }
  const std::string dtype = text(cfg, "dtype", "fp32");
  if (dtype != "fp32" && dtype != "float32") throw ConfigError("dtype '" + dtype + "' is not supported; use fp32");
  const std::string device = text(cfg, "device", "cpu");
  if (device != "cpu") throw ConfigError("device '" + device + "' is not supported; use cpu");
  if (s.val_every && !value_of(cfg, "dataset_val")) throw ConfigError("run_val_every_n_steps needs dataset_val");

  if (flag(cfg, "compile", false)) warnings.push_back("compile=True has no effect and is ignored");
  if (const ConfigNode* p = value_of(cfg, "profiler"); p && p->is_map() && p->has("enabled") &&
                                                        !p->at("enabled").is_null() && p->at("enabled").as_bool()) {
    warnings.push_back("profiler is not available and is ignored");
  }
  for (const auto& [key, value] : cfg.entries()) {
    if (!kKnownKeys.count(key)) warnings.push_back("unused config key '" + key + "'");
  }
  return s;
}

/// Token rows of one split, batched on demand.
class RowSource {
 public:
  RowSource(const DatasetSpec& ds, const TokenizerSpec& tok, std::int64_t model_max_len)
      : pad_len_(tok.max_seq_len) {
    const std::int64_t max_len = tok.max_seq_len.value_or(model_max_len);
    std::vector<data::TokenSequence> seqs;
    seqs.reserve(ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      auto seq = data::apply_instruct_template(ds.samples[i]);
      if (static_cast<std::int64_t>(seq.size()) > max_len) {
        try {
          seq = data::truncate_prompt(seq, max_len);
        } catch (const std::exception& e) {
          throw ConfigError("sample " + std::to_string(i) + " does not fit max_seq_len " + std::to_string(max_len) +
                            ": " + e.what());
        }
      }
      seqs.push_back(std::move(seq));
    }
    if (ds.packed) {
      packed_ = data::pack_sequences(seqs, max_len);
    } else {
      seqs_ = std::move(seqs);
    }
  }

  std::int64_t size() const {
    return static_cast<std::int64_t>(packed_.empty() ? seqs_.size() : packed_.size());
  }

  std::vector<data::PackedSequence> rows(std::span<const std::int64_t> indices) const {
    if (!packed_.empty()) {
      std::vector<data::PackedSequence> out;
      for (auto i : indices) out.push_back(packed_[static_cast<std::size_t>(i)]);
      return out;
    }
    std::vector<data::TokenSequence> picked;
    std::int64_t longest = 0;
    for (auto i : indices) {
      picked.push_back(seqs_[static_cast<std::size_t>(i)]);
      longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(picked.back().size()));
    }
    return data::pad_sequences(picked, pad_len_.value_or(longest));
  }

 private:
  std::optional<std::int64_t> pad_len_;
  std::vector<data::PackedSequence> packed_;
  std::vector<data::TokenSequence> seqs_;
};

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch, bool shuffle) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

loss::LossResult compute_loss(const nn::TransformerDecoder& model, const data::Batch& batch, const LossSpec& spec,
                              bool activation_checkpointing) {
  nn::ForwardOptions fo;
  fo.return_hidden = spec.linear;
  fo.activation_checkpointing = activation_checkpointing;
  Tensor out;
  {
    PhaseScope phase("forward");
    out = model.forward(batch.decoder_input(), fo);
  }
  PhaseScope phase("loss");
  if (spec.linear) {
    loss::LceOptions lo;
    lo.chunk_size = spec.chunk_size;
    lo.ignore_index = spec.ignore_index;
    return loss::linear_cross_entropy(out, model.output_weight(), batch.labels, lo);
  }
  return loss::cross_entropy(out, batch.labels, spec.ignore_index);
}

float evaluate(const nn::TransformerDecoder& model, const RowSource& rows, std::int64_t batch_size,
               const LossSpec& spec) {
  auto frozen = models::clone_decoder(model);
  NoGradGuard no_grad;
  double total = 0.0;
  std::int64_t tokens = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < rows.size(); start += batch_size) {
    idx.clear();
    for (std::int64_t i = start; i < std::min(rows.size(), start + batch_size); ++i) idx.push_back(i);
    auto batch = data::collate_batch(rows.rows(idx), spec.ignore_index);
    auto r = compute_loss(*frozen, batch, spec, false);
    total += static_cast<double>(r.loss.item()) * static_cast<double>(r.num_valid_tokens);
    tokens += r.num_valid_tokens;
  }
  return tokens == 0 ? 0.0f : static_cast<float>(total / static_cast<double>(tokens));
}

void merge_phase_peaks(StepRecord& rec, const MemorySnapshot& snap) {
  rec.forward_peak = std::max(rec.forward_peak, snap.phase_peak("forward"));
  rec.loss_peak = std::max(rec.loss_peak, snap.phase_peak("loss"));
  rec.backward_peak = std::max(rec.backward_peak, snap.phase_peak("backward"));
  rec.optimizer_peak = std::max(rec.optimizer_peak, snap.phase_peak("optimizer"));
  rec.gradient_peak = std::max(rec.gradient_peak, snap.peak(AllocTag::kGradient));
}

bool has_lora(const nn::TransformerDecoder& model) {
  for (const auto& [name, p] : model.named_parameters()) {
    if (checkpoint::is_adapter_name(name)) return true;
  }
  return false;
}

}  // namespace

std::uint64_t resolve_seed(const ConfigNode& cfg) {
  if (const char* env = std::getenv("MINITUNE_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("MINITUNE_SEED must be a non-negative integer, got '") + env + "'");
    }
  }
  const auto v = opt_int(cfg, "seed").value_or(0);
  if (v < 0) throw ConfigError("seed must be >= 0");
  return static_cast<std::uint64_t>(v);
}

RunReport run_sft(const ConfigNode& cfg_in, const RunOptions& options) {
  if (options.recipe != "sft_full" && options.recipe != "sft_lora") {
    throw std::invalid_argument("run_sft handles sft_full and sft_lora, not '" + options.recipe + "'");
  }
  RunReport report;
  report.recipe = options.recipe;
  auto warn = [&](const std::string& w) {
    if (options.log) *options.log << "warning: " << w << "\n";
  };

  ConfigNode cfg = config::resolve_interpolations(cfg_in);
  const Settings s = read_settings(cfg, report.warnings);
  for (const auto& w : report.warnings) warn(w);
  if (ConfigNode* m = value_of(cfg, "model") ? &cfg.at("model") : nullptr; m && m->is_map() && !m->has("seed")) {
    m->set("seed", ConfigNode::scalar(std::to_string(s.seed)));
  }

  auto meter = std::make_shared<MemoryMeter>();
  MemoryScope meter_scope(meter);

  auto model = build<std::shared_ptr<nn::TransformerDecoder>>(cfg, "model", "model");
  const auto tok = build<TokenizerSpec>(cfg, "tokenizer", "tokenizer");
  const auto ds = build<DatasetSpec>(cfg, "dataset", "dataset");
  const auto opt_spec = build<OptimizerSpec>(cfg, "optimizer", "optimizer");
  const auto loss_spec = build<LossSpec>(cfg, "loss", "loss");
  std::optional<CheckpointerSpec> ckpt_spec;
  if (value_of(cfg, "checkpointer")) ckpt_spec = build<CheckpointerSpec>(cfg, "checkpointer", "checkpointer");
  std::optional<LoggerSpec> logger_spec;
  if (value_of(cfg, "metric_logger")) logger_spec = build<LoggerSpec>(cfg, "metric_logger", "metric logger");
  std::optional<RowSource> val_rows;
  if (s.val_every) {
    const auto vds = build<DatasetSpec>(cfg, "dataset_val", "dataset");
    val_rows.emplace(vds, tok, model->max_seq_len());
  }

  const bool lora = options.recipe == "sft_lora";
  if (lora && !has_lora(*model)) throw ConfigError("sft_lora needs a model with LoRA adapters");
  if (tok.max_seq_len && *tok.max_seq_len > model->max_seq_len()) {
    throw ConfigError("tokenizer max_seq_len " + std::to_string(*tok.max_seq_len) + " exceeds the model's " +
                      std::to_string(model->max_seq_len()));
  }
  if (s.resume && (!ckpt_spec || ckpt_spec->checkpoint_dir.empty())) {
    throw ConfigError("resume_from_checkpoint needs checkpointer.checkpoint_dir");
  }

  const RowSource rows(ds, tok, model->max_seq_len());
  const std::int64_t batches_per_epoch = rows.size() / s.batch_size;
  std::int64_t steps_per_epoch = batches_per_epoch / s.grad_accum;
  if (s.max_steps_per_epoch) steps_per_epoch = std::min(steps_per_epoch, *s.max_steps_per_epoch);
  if (steps_per_epoch < 1) {
    throw ConfigError("dataset yields " + std::to_string(rows.size()) + " rows, fewer than one optimizer step of " +
                      std::to_string(s.batch_size * s.grad_accum));
  }

  nn::NamedParameters trainable;
  for (const auto& [name, p] : model->named_parameters()) {
    if (p.trainable()) trainable.emplace_back(name, p);
  }
  std::unique_ptr<optim::Optimizer> opt;
  std::unique_ptr<optim::InBackwardOptimizer> fused;
  if (s.fused) {
    fused = optim::InBackwardOptimizer::attach(trainable, opt_spec.hyper, opt_spec.kind, s.grad_accum);
  } else {
    opt = std::make_unique<optim::Optimizer>(trainable, opt_spec.hyper, opt_spec.kind);
  }
  auto optimizer_state = [&] { return fused ? fused->state_dict() : opt->state_dict(); };

  if (s.resume) {
    const auto ck = checkpoint::read_checkpoint(ckpt_spec->checkpoint_dir);
    if (ck.state.recipe != options.recipe) {
      throw ConfigError("checkpoint was written by recipe '" + ck.state.recipe + "', not '" + options.recipe + "'");
    }
    if (ck.state.seed != s.seed) {
      throw ConfigError("checkpoint seed " + std::to_string(ck.state.seed) + " differs from run seed " +
                        std::to_string(s.seed));
    }
    checkpoint::load_into(ck, *model);
    if (ck.optimizer) {
      if (fused) fused->load_state_dict(*ck.optimizer);
      else opt->load_state_dict(*ck.optimizer);
    } else {
      report.warnings.push_back("checkpoint has no optimizer state; moments restart from zero");
      warn(report.warnings.back());
    }
    report.resumed_from_step = ck.state.step;
  }

  const std::int64_t total_steps = steps_per_epoch * s.epochs;
  const std::vector<Parameter> clip_params = [&] {
    std::vector<Parameter> out;
    for (const auto& [name, p] : trainable) out.push_back(p);
    return out;
  }();

  auto save = [&](std::int64_t step, std::int64_t epoch) {
    const auto dir = std::filesystem::path(ckpt_spec->output_dir) / ("step_" + std::to_string(step));
    const auto sd = ckpt_spec->save_optimizer_state ? std::optional(optimizer_state()) : std::nullopt;
    checkpoint::save_checkpoint(dir, *model, lora ? checkpoint::Mode::kAdapter : checkpoint::Mode::kFull,
                                {step, epoch, s.seed, options.recipe}, sd ? &*sd : nullptr);
    report.checkpoints.push_back(dir.string());
  };

  std::int64_t global_step = report.resumed_from_step;
  for (std::int64_t epoch = global_step / steps_per_epoch; epoch < s.epochs; ++epoch) {
    const auto order = epoch_order(rows.size(), s.seed, epoch, s.shuffle);
    for (std::int64_t in_epoch = global_step - epoch * steps_per_epoch; in_epoch < steps_per_epoch; ++in_epoch) {
      StepRecord rec;
      rec.step = ++global_step;
      rec.epoch = epoch;
      rec.lr = opt_spec.hyper.lr;
      const auto t0 = std::chrono::steady_clock::now();
      for (std::int64_t k = 0; k < s.grad_accum; ++k) {
        const std::int64_t b = in_epoch * s.grad_accum + k;
        const std::span<const std::int64_t> idx(order.data() + b * s.batch_size, static_cast<std::size_t>(s.batch_size));
        const auto batch = data::collate_batch(rows.rows(idx), loss_spec.ignore_index);
        rec.tokens += batch.batch * batch.seq - batch.num_pad_tokens;
        rec.label_tokens += batch.num_label_tokens;
        report.total_pad_tokens += batch.num_pad_tokens;

        meter->reset_peaks();
        Tape tape;
        Tape::Scope tape_scope(tape);
        nn::ForwardOptions fo;
        fo.return_hidden = loss_spec.linear;
        fo.activation_checkpointing = s.activation_checkpointing;
        Tensor out;
        {
          PhaseScope phase("forward");
          out = model->forward(batch.decoder_input(), fo);
        }
        rec.forward_activation_peak = std::max(rec.forward_activation_peak, meter->snapshot().peak(AllocTag::kActivation));
        Tensor objective;
        {
          PhaseScope phase("loss");
          loss::LossResult r;
          if (loss_spec.linear) {
            loss::LceOptions lo;
            lo.chunk_size = loss_spec.chunk_size;
            lo.ignore_index = loss_spec.ignore_index;
            r = loss::linear_cross_entropy(out, model->output_weight(), batch.labels, lo);
          } else {
            r = loss::cross_entropy(out, batch.labels, loss_spec.ignore_index);
          }
          out = Tensor();
          objective = s.grad_accum == 1 ? r.loss : ops::mul_scalar(r.loss, 1.0f / static_cast<float>(s.grad_accum));
        }
        rec.loss += objective.item();
        {
          PhaseScope phase("backward");
          tape.backward(objective);
        }
        objective = Tensor();
        tape.reset();
        merge_phase_peaks(rec, meter->snapshot());
      }
      if (!std::isfinite(rec.loss)) {
        throw std::runtime_error("loss is not finite at step " + std::to_string(rec.step));
      }
      if (opt) {
        meter->reset_peaks();
        {
          PhaseScope phase("optimizer");
          if (s.clip_grad_norm) optim::clip_grad_norm(clip_params, *s.clip_grad_norm);
          opt->step();
          opt->zero_grad();
        }
        merge_phase_peaks(rec, meter->snapshot());
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      report.peak_bytes = std::max({report.peak_bytes, rec.forward_peak, rec.loss_peak, rec.backward_peak,
                                    rec.optimizer_peak});

      if (s.val_every && rec.step % *s.val_every == 0) {
        rec.val_loss = evaluate(*model, *val_rows, s.batch_size_val, loss_spec);
      }
      if (ckpt_spec && ((ckpt_spec->save_every_n_steps > 0 && rec.step % ckpt_spec->save_every_n_steps == 0) ||
                        rec.step == total_steps)) {
        save(rec.step, epoch);
      }
      if (options.log && rec.step % s.log_every == 0) {
        char line[160];
        std::snprintf(line, sizeof line, "step %lld epoch %lld loss %.6f tokens %lld wall_ms %.2f",
                      static_cast<long long>(rec.step), static_cast<long long>(rec.epoch), rec.loss,
                      static_cast<long long>(rec.tokens), rec.wall_ms);
        *options.log << line;
        if (rec.val_loss) *options.log << " val_loss " << *rec.val_loss;
        *options.log << "\n";
      }
      report.total_tokens += rec.tokens;
      report.total_wall_s += rec.wall_ms / 1000.0;
      report.steps.push_back(rec);
      if (options.on_step) options.on_step(report.steps.back(), *model);
    }
  }
  report.tokens_per_second = report.total_wall_s > 0.0 ? static_cast<double>(report.total_tokens) / report.total_wall_s : 0.0;
  report.optimizer_state_bytes = fused ? fused->state_bytes() : opt->state_bytes();
  report.model = model;

  if (options.write_files) {
    std::filesystem::path log_dir = logger_spec ? std::filesystem::path(logger_spec->log_dir) : std::filesystem::path(s.output_dir);
    if (!log_dir.empty()) {
      std::filesystem::create_directories(log_dir);
      std::ofstream csv(log_dir / "metrics.csv");
      write_metrics_csv(report, csv);
    }
    if (!s.output_dir.empty()) {
      std::filesystem::create_directories(s.output_dir);
      std::ofstream summary(std::filesystem::path(s.output_dir) / "summary.txt");
      write_summary(report, summary);
      std::ofstream yaml(std::filesystem::path(s.output_dir) / "config.yaml");
      yaml << config::serialize(cfg) << "\n";
    }
  }
  return report;
}

void write_metrics_csv(const RunReport& report, std::ostream& out) {
  out << "step,epoch,loss,tokens,label_tokens,wall_ms,lr,forward_peak_bytes,loss_peak_bytes,backward_peak_bytes,"
         "optimizer_peak_bytes,forward_activation_peak_bytes,gradient_peak_bytes,val_loss\n";
  char buf[64];
  for (const auto& r : report.steps) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    out << r.step << ',' << r.epoch << ',' << buf << ',' << r.tokens << ',' << r.label_tokens << ',';
    std::snprintf(buf, sizeof buf, "%.3f", r.wall_ms);
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.9g", r.lr);
    out << buf << ',' << r.forward_peak << ',' << r.loss_peak << ',' << r.backward_peak << ',' << r.optimizer_peak
        << ',' << r.forward_activation_peak << ',' << r.gradient_peak << ',';
    if (r.val_loss) {
      std::snprintf(buf, sizeof buf, "%.9g", *r.val_loss);
      out << buf;
    }
    out << '\n';
  }
}

void write_summary(const RunReport& report, std::ostream& out) {
  char buf[64];
  out << "recipe: " << report.recipe << "\n";
  out << "steps: " << report.steps.size() << "\n";
  if (report.resumed_from_step > 0) out << "resumed_from_step: " << report.resumed_from_step << "\n";
  if (!report.steps.empty()) {
    std::snprintf(buf, sizeof buf, "%.6f", report.steps.front().loss);
    out << "first_loss: " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.6f", report.steps.back().loss);
    out << "final_loss: " << buf << "\n";
  }
  out << "non_pad_tokens: " << report.total_tokens << "\n";
  std::snprintf(buf, sizeof buf, "%.4f", report.pad_fraction());
  out << "pad_fraction: " << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.3f", report.total_wall_s);
  out << "wall_seconds: " << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.1f", report.tokens_per_second);
  out << "tokens_per_second: " << buf << "\n";
  out << "peak_bytes: " << report.peak_bytes << "\n";
  out << "optimizer_state_bytes: " << report.optimizer_state_bytes << "\n";
  for (const auto& c : report.checkpoints) out << "checkpoint: " << c << "\n";
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
}

}  // namespace minitune::recipes
