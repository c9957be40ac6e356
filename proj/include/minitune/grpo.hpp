// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Asynchronous GRPO inside one process. Rollout generators, post-processing
// workers and one trainer exchange data only through a BoundedQueue (raw
// rollouts), a ReplayBuffer (processed trajectories) and a ParameterServer
// (versioned weights).
//
// Versions: a rollout's policy_version is the number of optimizer steps the
// trainer had taken when the weights it was sampled from were published.
// Lag at consumption is trainer_version - policy_version.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "minitune/config.hpp"
#include "minitune/model_args.hpp"
#include "minitune/nn.hpp"
#include "minitune/optim.hpp"

namespace minitune::grpo {

struct GenerationOptions {
  std::int64_t group_size = 4;
  std::int64_t max_new_tokens = 16;
  /// 0 selects greedy decoding; log-probs are then taken at temperature 1.
  float temperature = 1.0f;
};

struct Rollout {
  std::int64_t id = 0;
  std::vector<std::int32_t> prompt;
  std::vector<std::vector<std::int32_t>> responses;  // [G][L]
  std::vector<std::vector<float>> logprobs;          // behavior log-probs, [G][L]
  std::int64_t policy_version = 0;
  double created_time = 0.0;
  std::int64_t group_size() const { return static_cast<std::int64_t>(responses.size()); }
};

struct ProcessedTrajectory {
  Rollout rollout;
  std::vector<float> rewards;                  // [G]
  std::vector<float> advantages;               // [G]
  std::vector<std::vector<std::uint8_t>> masks;  // [G][L], 1 on response tokens
  std::vector<std::vector<float>> ref_logprobs;  // frozen initial policy, [G][L]
  double processed_time = 0.0;
  std::int64_t id() const { return rollout.id; }
};

using RewardFn = std::function<float(std::span<const std::int32_t> prompt, std::span<const std::int32_t> response)>;

/// Fraction of response tokens equal to `target`.
RewardFn target_token_reward(std::int32_t target);

/// Samples G responses of max_new_tokens tokens each. The RNG is keyed by
/// (seed, rollout_id), so a rollout does not depend on scheduling.
Rollout generate_rollout(const nn::TransformerDecoder& policy, std::int64_t policy_version, std::int64_t rollout_id,
                         std::vector<std::int32_t> prompt, const GenerationOptions& options, std::uint64_t seed,
                         double created_time = 0.0);

/// Log-probabilities [G, L] of each response token given the prompt and the
/// preceding response tokens. Differentiable when grad mode is on.
Tensor response_logprobs(const nn::TransformerDecoder& policy, std::span<const std::int32_t> prompt,
                         const std::vector<std::vector<std::int32_t>>& responses, float temperature);

/// (r - mean) / (population std + eps_std).
std::vector<float> group_advantages(std::span<const float> rewards, float eps_std = 1e-6f);

/// Rewards, group-normalized advantages, masks and (when `reference` is
/// given) reference-policy log-probs.
ProcessedTrajectory postprocess(Rollout rollout, const RewardFn& reward, const nn::TransformerDecoder* reference,
                                float temperature, double processed_time = 0.0);

class LagViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TrainerStepResult {
  float loss = 0.0f;
  std::int64_t trajectories = 0;
  std::int64_t lag_min = 0;
  std::int64_t lag_max = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
};

/// Forward/backward of the clipped objective on one batch, then one
/// optimizer step. Throws LagViolation when a trajectory's lag exceeds
/// `max_lag` (when given) or is negative.
TrainerStepResult trainer_step(const std::vector<ProcessedTrajectory>& batch, nn::TransformerDecoder& policy,
                               optim::Optimizer& optimizer, std::int64_t trainer_version,
                               std::optional<std::int64_t> max_lag, float clip_epsilon, float temperature);

/// Accumulates `scale` times one trajectory's objective gradient into the
/// policy parameters without stepping. Returns the unscaled objective.
float accumulate_trajectory(const ProcessedTrajectory& trajectory, nn::TransformerDecoder& policy, float scale,
                            float clip_epsilon, float temperature);

// ---------------------------------------------------------------- structures

/// FIFO with a fixed capacity. try_* never block (virtual scheduler);
/// push/pop block until space/data or close() (thread mode).
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("queue capacity must be >= 1");
  }

  /// Moves from `item` only on success.
  bool try_push(T& item) {
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_ || items_.size() >= capacity_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> try_pop() {
    std::lock_guard<std::mutex> lock(mu_);
    return pop_locked();
  }

  /// Returns false when the queue was closed first. `blocked` is set when
  /// the call had to wait for space.
  bool push(T item, bool* blocked = nullptr) {
    std::unique_lock<std::mutex> lock(mu_);
    if (blocked) *blocked = !closed_ && items_.size() >= capacity_;
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  /// nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock<std::mutex> lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    return pop_locked();
  }

  void close() {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  /// Removes everything left, for end-of-run accounting.
  std::vector<T> drain() {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<T> out(std::make_move_iterator(items_.begin()), std::make_move_iterator(items_.end()));
    items_.clear();
    not_full_.notify_all();
    return out;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return items_.size();
  }
  std::size_t capacity() const { return capacity_; }
  std::size_t high_water() const {
    std::lock_guard<std::mutex> lock(mu_);
    return high_water_;
  }

 private:
  std::optional<T> pop_locked() {
    if (items_.empty()) return std::nullopt;
    T out = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return out;
  }

  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  std::size_t high_water_ = 0;
  bool closed_ = false;
};

/// Ring of processed trajectories; adding to a full buffer evicts the oldest.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::uint64_t seed);

  /// Returns the evicted trajectory, if any.
  std::optional<ProcessedTrajectory> add(ProcessedTrajectory t);
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::vector<std::int64_t> ids() const;

  std::size_t count_if(const std::function<bool(const ProcessedTrajectory&)>& pred) const;
  /// Removes and returns every matching trajectory, oldest first.
  std::vector<ProcessedTrajectory> remove_if(const std::function<bool(const ProcessedTrajectory&)>& pred);
  /// Removes the given ids, returned in the order asked. Throws if one is absent.
  std::vector<ProcessedTrajectory> take_ids(std::span<const std::int64_t> ids);
  /// Uniform sample of n distinct trajectories, removed from the buffer.
  std::vector<ProcessedTrajectory> sample_take(std::size_t n);

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::deque<ProcessedTrajectory> items_;
  std::mt19937_64 rng_;
};

struct WeightSnapshot {
  std::int64_t version = 0;          // publish counter of the server
  std::int64_t trainer_version = 0;  // optimizer steps behind these weights
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
};

WeightSnapshot capture_weights(const nn::TransformerDecoder& model);
/// Copies snapshot values into a model with the same parameter names.
void load_weights(const WeightSnapshot& snapshot, nn::TransformerDecoder& model);

/// Readers always get a complete snapshot. A publish is staged tensor by
/// tensor and becomes visible only at commit.
class ParameterServer {
 public:
  explicit ParameterServer(WeightSnapshot initial);

  std::shared_ptr<const WeightSnapshot> fetch() const;
  std::int64_t version() const;

  class Staging {
   public:
    void stage(std::string name, std::vector<float> values);
    /// Publishes the staged tensors as version + 1.
    std::int64_t commit();

   private:
    friend class ParameterServer;
    Staging(ParameterServer& server, std::int64_t trainer_version);
    ParameterServer* server_;
    std::unique_ptr<WeightSnapshot> next_;
  };
  Staging begin_publish(std::int64_t trainer_version);
  std::int64_t publish(const nn::TransformerDecoder& model, std::int64_t trainer_version);

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const WeightSnapshot> current_;
};

// --------------------------------------------------------------- orchestration

enum class Regime { kSync, kAsyncOnPolicy, kAsyncOffPolicy };
std::string to_string(Regime regime);
Regime regime_from_string(const std::string& name);

/// Virtual durations of each action.
struct Durations {
  double generate = 8.0;
  double postprocess = 2.0;
  double train_base = 1.0;
  double train_per_trajectory = 1.0;
  double publish = 1.0;
};

struct OrchestratorConfig {
  Regime regime = Regime::kSync;
  std::int64_t max_lag = 1;       // off-policy only
  std::int64_t sync_cadence = 1;  // trainer steps between publishes
  std::int64_t num_generators = 2;
  std::int64_t num_postprocessors = 1;
  std::int64_t queue_capacity = 4;
  std::int64_t buffer_capacity = 64;
  std::int64_t total_steps = 200;
  std::int64_t rollouts_per_step = 2;  // trajectories per trainer step
  std::uint64_t seed = 0;
  GenerationOptions generation;
  float clip_epsilon = 0.2f;
  optim::AdamWHyper hyper;
  models::DecoderArgs policy;
  std::vector<std::vector<std::int32_t>> prompts;
  std::int32_t target_token = 0;
  Durations durations;
  double deadlock_quantum = 1000.0;
  bool real_threads = false;
  double thread_stall_seconds = 30.0;

  void validate() const;
};

/// Small bandit: vocab 16, reward for emitting one target token.
OrchestratorConfig toy_bandit_config(Regime regime, std::uint64_t seed = 0);

struct Event {
  double time = 0.0;
  std::string role;  // generator | postprocessor | trainer | queue | buffer | server | run
  std::int64_t worker = 0;
  std::string kind;
  std::vector<std::pair<std::string, double>> payload;

  double get(const std::string& key, double fallback = 0.0) const;
  bool has(const std::string& key) const;
};

class DeadlockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  std::int64_t step = 0;
  double time = 0.0;
  float loss = 0.0f;
  std::int64_t trajectories = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  std::int64_t lag_min = 0;
  std::int64_t lag_max = 0;
};

struct OrchestrationResult {
  std::vector<Event> trace;
  std::vector<StepMetrics> steps;
  std::shared_ptr<nn::TransformerDecoder> policy;
  std::int64_t server_version = 0;
};

/// Runs to total_steps trainer steps. Virtual time unless real_threads.
OrchestrationResult run_orchestration(const OrchestratorConfig& config);

/// Consolidated view computed from an event stream alone.
struct RunReport {
  std::map<std::string, std::int64_t> event_counts;
  std::int64_t num_events = 0;
  std::int64_t generated = 0;
  std::int64_t consumed = 0;
  std::int64_t evicted = 0;
  std::int64_t stale_dropped = 0;
  std::int64_t leftover = 0;
  std::int64_t duplicate_consumptions = 0;
  std::int64_t unaccounted = 0;  // generated but neither consumed, evicted, dropped nor left over
  std::map<std::int64_t, std::int64_t> lag_distribution;
  std::vector<double> latency_bucket_edges;
  std::vector<std::int64_t> latency_histogram;  // counts per [edge_i, edge_i+1), last open-ended
  std::vector<std::pair<double, std::int64_t>> queue_occupancy;
  std::int64_t queue_high_water = 0;
  double generator_blocked_time = 0.0;
  double trainer_idle_time = 0.0;
  double duration = 0.0;
  double buffer_add_rate = 0.0;
  double buffer_consume_rate = 0.0;
  std::vector<StepMetrics> steps;
};

RunReport summarize(const std::vector<Event>& trace);

void write_trace_jsonl(const std::vector<Event>& trace, std::ostream& out);
/// One row per trainer step followed by a key,value summary block.
void write_report_csv(const RunReport& report, std::ostream& out);

OrchestratorConfig orchestrator_config_from(const config::ConfigNode& root);

/// Config-driven run used by `tune run async_grpo`. Writes trace.jsonl,
/// report.csv and summary.txt under output_dir when it is set.
OrchestrationResult run_async_grpo(const config::ConfigNode& root, std::ostream* log = nullptr);

}  // namespace minitune::grpo
