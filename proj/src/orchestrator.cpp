// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <queue>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "minitune/components.hpp"
#include "minitune/grpo.hpp"
#include "minitune/models.hpp"
#include "minitune/recipes.hpp"

namespace minitune::grpo {

using config::ConfigError;
using config::ConfigNode;

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kSync: return "sync";
    case Regime::kAsyncOnPolicy: return "async_on_policy";
    case Regime::kAsyncOffPolicy: return "async_off_policy";
  }
  return "unknown";
}

Regime regime_from_string(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "sync") return Regime::kSync;
  if (s == "async_on_policy" || s == "on_policy") return Regime::kAsyncOnPolicy;
  if (s == "async_off_policy" || s == "off_policy") return Regime::kAsyncOffPolicy;
  throw ConfigError("unknown regime '" + name + "' (expected sync, async_on_policy or async_off_policy)");
}

void OrchestratorConfig::validate() const {
  auto positive = [](std::int64_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive(num_generators, "num_generators");
  positive(num_postprocessors, "num_postprocessors");
  positive(queue_capacity, "queue_capacity");
  positive(buffer_capacity, "buffer_capacity");
  positive(rollouts_per_step, "rollouts_per_step");
  positive(sync_cadence, "sync_cadence");
  positive(generation.group_size, "group_size");
  positive(generation.max_new_tokens, "max_new_tokens");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (generation.group_size < 2) throw ConfigError("group_size must be >= 2 for group-normalized advantages");
  if (regime == Regime::kAsyncOffPolicy) positive(max_lag, "max_lag");
  if (regime != Regime::kAsyncOffPolicy && sync_cadence != 1) {
    throw ConfigError("sync_cadence must be 1 in the " + to_string(regime) + " regime (lag would exceed 0)");
  }
  if (prompts.empty()) throw ConfigError("at least one prompt is required");
  for (const auto& p : prompts) {
    if (p.empty()) throw ConfigError("prompts must be non-empty");
    for (auto t : p) {
      if (t < 0 || t >= policy.vocab_size) throw ConfigError("prompt token " + std::to_string(t) + " outside vocab");
    }
    if (static_cast<std::int64_t>(p.size()) + generation.max_new_tokens - 1 > policy.max_seq_len) {
      throw ConfigError("prompt length + max_new_tokens exceeds the policy's max_seq_len");
    }
  }
  if (target_token < 0 || target_token >= policy.vocab_size) throw ConfigError("target_token outside vocab");
  if (!(clip_epsilon > 0.0f)) throw ConfigError("clip_epsilon must be > 0");
  if (!(deadlock_quantum > 0.0)) throw ConfigError("deadlock_quantum must be > 0");
  for (double d : {durations.generate, durations.postprocess, durations.train_base, durations.train_per_trajectory,
                   durations.publish}) {
    if (!(d >= 0.0)) throw ConfigError("durations must be >= 0");
  }
  try {
    hyper.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("optimizer: ") + e.what());
  }
}

OrchestratorConfig toy_bandit_config(Regime regime, std::uint64_t seed) {
  OrchestratorConfig c;
  c.regime = regime;
  c.max_lag = 2;
  c.seed = seed;
  c.total_steps = 200;
  c.rollouts_per_step = 2;
  c.generation = {4, 4, 1.0f};
  c.hyper.lr = 1e-2f;
  c.hyper.weight_decay = 0.0f;
  c.policy.vocab_size = 16;
  c.policy.num_layers = 1;
  c.policy.num_heads = 2;
  c.policy.num_kv_heads = 2;
  c.policy.embed_dim = 16;
  c.policy.max_seq_len = 8;
  c.policy.seed = seed;
  c.prompts = {{1, 2, 3}, {1, 4, 5}, {1, 6, 7}, {1, 3, 2}};
  c.target_token = 9;
  return c;
}

double Event::get(const std::string& key, double fallback) const {
  for (const auto& [k, v] : payload) {
    if (k == key) return v;
  }
  return fallback;
}

bool Event::has(const std::string& key) const {
  return std::any_of(payload.begin(), payload.end(), [&](const auto& kv) { return kv.first == key; });
}

namespace {

using Payload = std::vector<std::pair<std::string, double>>;
double num(std::int64_t v) { return static_cast<double>(v); }

enum Where { kInQueue = 0, kInBuffer = 1, kGenerating = 2, kBlocked = 3, kPostprocessing = 4 };

// Everything both schedulers share: the trainer's policy and optimizer and
// the three communication structures.
struct Setup {
  explicit Setup(const OrchestratorConfig& c)
      : cfg(c),
        batch(c.rollouts_per_step),
        policy(models::llama3(c.policy)),
        initial(models::clone_decoder(*policy)),
        optimizer(std::make_unique<optim::Optimizer>(policy->named_parameters(), c.hyper)),
        server(capture_weights(*policy)),
        queue(static_cast<std::size_t>(c.queue_capacity)),
        buffer(static_cast<std::size_t>(c.buffer_capacity), c.seed ^ 0x9e3779b97f4a7c15ULL),
        reward(target_token_reward(c.target_token)) {}

  /// SYNC and ON_POLICY: a rollout id belongs to batch id / B and may be
  /// claimed only once the weights of that step are published.
  bool may_claim(std::int64_t next_id) const {
    if (cfg.regime == Regime::kAsyncOffPolicy) return true;
    return next_id < batch * (server.fetch()->trainer_version + 1);
  }
  std::optional<std::int64_t> lag_bound() const {
    return cfg.regime == Regime::kAsyncOffPolicy ? std::optional<std::int64_t>(cfg.max_lag)
                                                  : std::optional<std::int64_t>(0);
  }
  const std::vector<std::int32_t>& prompt_for(std::int64_t id) const {
    return cfg.prompts[static_cast<std::size_t>(id % static_cast<std::int64_t>(cfg.prompts.size()))];
  }

  const OrchestratorConfig& cfg;
  const std::int64_t batch;
  std::shared_ptr<nn::TransformerDecoder> policy;
  std::shared_ptr<nn::TransformerDecoder> initial;
  std::unique_ptr<optim::Optimizer> optimizer;
  ParameterServer server;
  BoundedQueue<Rollout> queue;
  ReplayBuffer buffer;
  RewardFn reward;
};

Payload step_payload(std::int64_t step, const TrainerStepResult& r) {
  return {{"step", num(step)},         {"loss", r.loss},
          {"reward_mean", r.reward_mean}, {"reward_std", r.reward_std},
          {"n", num(r.trajectories)},  {"lag_min", num(r.lag_min)},
          {"lag_max", num(r.lag_max)}};
}

StepMetrics step_metrics(std::int64_t step, double time, const TrainerStepResult& r) {
  return {step, time, r.loss, r.trajectories, r.reward_mean, r.reward_std, r.lag_min, r.lag_max};
}

// ON_POLICY trainer intake: one trajectory at a time, gradients accumulated
// at 1/B, one optimizer step per B trajectories.
struct Streaming {
  std::int64_t taken = 0;
  double loss = 0.0;
  double reward_sum = 0.0;
  double reward_sq = 0.0;
  std::int64_t rewards = 0;

  void add(const ProcessedTrajectory& t, float loss_value) {
    ++taken;
    loss += loss_value;
    for (float r : t.rewards) {
      reward_sum += r;
      reward_sq += static_cast<double>(r) * r;
      ++rewards;
    }
  }
  TrainerStepResult finish() const {
    TrainerStepResult r;
    r.loss = static_cast<float>(loss / static_cast<double>(taken));
    r.trajectories = taken;
    r.reward_mean = reward_sum / static_cast<double>(rewards);
    r.reward_std = std::sqrt(std::max(0.0, reward_sq / static_cast<double>(rewards) - r.reward_mean * r.reward_mean));
    return r;
  }
};

// ------------------------------------------------------------ virtual time

class VirtualEngine {
 public:
  explicit VirtualEngine(const OrchestratorConfig& cfg) : s_(cfg) {
    for (std::int64_t g = 0; g < cfg.num_generators; ++g) {
      gens_.emplace_back().model = models::clone_decoder(*s_.policy);
    }
    for (std::int64_t p = 0; p < cfg.num_postprocessors; ++p) {
      pps_.emplace_back().reference = models::clone_decoder(*s_.initial);
    }
  }

  OrchestrationResult run() {
    const auto& cfg = s_.cfg;
    log("run", 0, "run_start",
        {{"regime", static_cast<double>(static_cast<int>(cfg.regime))},
         {"total_steps", num(cfg.total_steps)},
         {"batch", num(s_.batch)}});
    if (cfg.total_steps == 0) {
      finish();
    } else {
      for (std::size_t g = 0; g < gens_.size(); ++g) at(0.0, [this, g] { gen_start(g); });
      for (std::size_t p = 0; p < pps_.size(); ++p) at(0.0, [this, p] { pp_start(p); });
      at(0.0, [this] { trainer_try(); });
    }
    while (!done_) {
      if (events_.empty() || now_ - last_progress_ > cfg.deadlock_quantum) deadlock();
      auto ev = events_.top();
      events_.pop();
      now_ = ev.time;
      ev.fn();
    }
    OrchestrationResult out;
    out.trace = std::move(trace_);
    out.steps = std::move(steps_);
    out.policy = s_.policy;
    out.server_version = s_.server.version();
    return out;
  }

 private:
  struct Scheduled {
    double time;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Scheduled& o) const { return time != o.time ? time > o.time : seq > o.seq; }
  };
  struct Generator {
    std::shared_ptr<nn::TransformerDecoder> model;
    std::int64_t loaded_version = 0;
    std::optional<Rollout> held;
    bool waiting = false;
    bool blocked = false;
    double blocked_since = 0.0;
  };
  struct Postprocessor {
    std::shared_ptr<nn::TransformerDecoder> reference;
    std::optional<ProcessedTrajectory> held;
    bool waiting = false;
  };

  void at(double time, std::function<void()> fn) { events_.push({time, seq_++, std::move(fn)}); }
  void log(const std::string& role, std::int64_t worker, const std::string& kind, Payload payload) {
    trace_.push_back({now_, role, worker, kind, std::move(payload)});
  }

  // generators
  void gen_start(std::size_t g) {
    if (done_) return;
    auto& gen = gens_[g];
    if (!s_.may_claim(next_id_)) {
      gen.waiting = true;
      return;
    }
    gen.waiting = false;
    const auto snap = s_.server.fetch();
    const bool load = snap->version != gen.loaded_version;
    if (load) {
      load_weights(*snap, *gen.model);
      gen.loaded_version = snap->version;
    }
    log("generator", static_cast<std::int64_t>(g), "fetch",
        {{"version", num(snap->version)}, {"policy_version", num(snap->trainer_version)}, {"loaded", load ? 1.0 : 0.0}});
    const std::int64_t id = next_id_++;
    log("generator", static_cast<std::int64_t>(g), "generate_start",
        {{"id", num(id)}, {"policy_version", num(snap->trainer_version)}});
    gen.held = generate_rollout(*gen.model, snap->trainer_version, id, s_.prompt_for(id), s_.cfg.generation,
                                s_.cfg.seed, now_);
    at(now_ + s_.cfg.durations.generate, [this, g] { gen_end(g); });
  }

  void gen_end(std::size_t g) {
    auto& gen = gens_[g];
    const std::int64_t id = gen.held->id;
    log("generator", static_cast<std::int64_t>(g), "generate_end",
        {{"id", num(id)}, {"policy_version", num(gen.held->policy_version)}});
    if (!s_.queue.try_push(*gen.held)) {
      gen.blocked = true;
      gen.blocked_since = now_;
      blocked_.push_back(g);
      log("queue", static_cast<std::int64_t>(g), "queue_blocked", {{"id", num(id)}, {"size", num(s_.queue.size())}});
      return;
    }
    gen.held.reset();
    log("queue", static_cast<std::int64_t>(g), "queue_push", {{"id", num(id)}, {"size", num(s_.queue.size())}});
    wake_postprocessors();
    gen_start(g);
  }

  void unblock_one() {
    if (blocked_.empty()) return;
    const std::size_t g = blocked_.front();
    blocked_.pop_front();
    auto& gen = gens_[g];
    const std::int64_t id = gen.held->id;
    if (!s_.queue.try_push(*gen.held)) throw std::logic_error("queue had no space after a pop");
    gen.held.reset();
    gen.blocked = false;
    log("queue", static_cast<std::int64_t>(g), "queue_unblocked", {{"id", num(id)}, {"blocked", now_ - gen.blocked_since}});
    log("queue", static_cast<std::int64_t>(g), "queue_push", {{"id", num(id)}, {"size", num(s_.queue.size())}});
    wake_postprocessors();
    at(now_, [this, g] { gen_start(g); });
  }

  void wake_generators() {
    for (std::size_t g = 0; g < gens_.size(); ++g) {
      if (gens_[g].waiting) {
        gens_[g].waiting = false;
        at(now_, [this, g] { gen_start(g); });
      }
    }
  }

  // post-processors
  void wake_postprocessors() {
    for (std::size_t p = 0; p < pps_.size(); ++p) {
      if (pps_[p].waiting) {
        pps_[p].waiting = false;
        at(now_, [this, p] { pp_start(p); });
      }
    }
  }

  void pp_start(std::size_t p) {
    if (done_) return;
    auto& pp = pps_[p];
    auto r = s_.queue.try_pop();
    if (!r) {
      pp.waiting = true;
      return;
    }
    log("queue", static_cast<std::int64_t>(p), "queue_pop", {{"id", num(r->id)}, {"size", num(s_.queue.size())}});
    unblock_one();
    const double end = now_ + s_.cfg.durations.postprocess;
    pp.held = postprocess(std::move(*r), s_.reward, pp.reference.get(), s_.cfg.generation.temperature, end);
    at(end, [this, p] { pp_end(p); });
  }

  void pp_end(std::size_t p) {
    auto& pp = pps_[p];
    const std::int64_t id = pp.held->id();
    double mean = 0.0;
    for (float r : pp.held->rewards) mean += r;
    mean /= static_cast<double>(pp.held->rewards.size());
    log("postprocessor", static_cast<std::int64_t>(p), "postprocess_end", {{"id", num(id)}, {"reward_mean", mean}});
    auto evicted = s_.buffer.add(std::move(*pp.held));
    pp.held.reset();
    log("buffer", static_cast<std::int64_t>(p), "buffer_add", {{"id", num(id)}, {"size", num(s_.buffer.size())}});
    if (evicted) log("buffer", static_cast<std::int64_t>(p), "buffer_evict", {{"id", num(evicted->id())}});
    if (trainer_waiting_) {
      trainer_waiting_ = false;
      at(now_, [this] { trainer_try(); });
    }
    pp_start(p);
  }

  // trainer
  void trainer_wait(std::int64_t eligible) {
    if (!wait_logged_) {
      log("trainer", 0, "trainer_wait", {{"step", num(step_)}, {"eligible", num(eligible)}});
      wait_logged_ = true;
    }
    trainer_waiting_ = true;
  }

  void trainer_try() {
    if (done_ || trainer_busy_) return;
    const std::int64_t b = s_.batch;
    switch (s_.cfg.regime) {
      case Regime::kSync: {
        const std::int64_t lo = step_ * b;
        const auto present =
            s_.buffer.count_if([&](const ProcessedTrajectory& t) { return t.id() >= lo && t.id() < lo + b; });
        if (static_cast<std::int64_t>(present) < b) return trainer_wait(static_cast<std::int64_t>(present));
        std::vector<std::int64_t> ids(static_cast<std::size_t>(b));
        for (std::int64_t j = 0; j < b; ++j) ids[static_cast<std::size_t>(j)] = lo + j;
        return train_batch(s_.buffer.take_ids(ids));
      }
      case Regime::kAsyncOnPolicy: {
        const std::int64_t id = step_ * b + stream_.taken;
        if (s_.buffer.count_if([&](const ProcessedTrajectory& t) { return t.id() == id; }) == 0) {
          return trainer_wait(0);
        }
        const std::int64_t ids[] = {id};
        auto taken = s_.buffer.take_ids(ids);
        train_streamed(std::move(taken.front()));
        return;
      }
      case Regime::kAsyncOffPolicy: {
        auto stale = s_.buffer.remove_if(
            [&](const ProcessedTrajectory& t) { return step_ - t.rollout.policy_version > s_.cfg.max_lag; });
        for (const auto& t : stale) {
          log("buffer", 0, "stale_drop", {{"id", num(t.id())}, {"lag", num(step_ - t.rollout.policy_version)}});
        }
        const std::size_t eligible = s_.buffer.size();
        if (eligible == 0) return trainer_wait(0);
        return train_batch(s_.buffer.sample_take(std::min<std::size_t>(static_cast<std::size_t>(b), eligible)));
      }
    }
  }

  void consumed(const ProcessedTrajectory& t) {
    log("trainer", 0, "consume",
        {{"id", num(t.id())}, {"lag", num(step_ - t.rollout.policy_version)}, {"step", num(step_)}});
    wait_logged_ = false;
    last_progress_ = now_;
  }

  void train_batch(std::vector<ProcessedTrajectory> batch) {
    for (const auto& t : batch) consumed(t);
    log("trainer", 0, "train_start", {{"step", num(step_)}, {"n", num(static_cast<std::int64_t>(batch.size()))}});
    auto res = trainer_step(batch, *s_.policy, *s_.optimizer, step_, s_.lag_bound(), s_.cfg.clip_epsilon,
                            s_.cfg.generation.temperature);
    trainer_busy_ = true;
    const double end = now_ + s_.cfg.durations.train_base +
                       s_.cfg.durations.train_per_trajectory * static_cast<double>(batch.size());
    at(end, [this, res] { train_end(res); });
  }

  void train_streamed(ProcessedTrajectory t) {
    const std::int64_t lag = step_ - t.rollout.policy_version;
    if (lag != 0) throw LagViolation("trajectory " + std::to_string(t.id()) + " has lag " + std::to_string(lag));
    consumed(t);
    if (stream_.taken == 0) log("trainer", 0, "train_start", {{"step", num(step_)}, {"n", num(s_.batch)}});
    const float value = accumulate_trajectory(t, *s_.policy, 1.0f / static_cast<float>(s_.batch),
                                              s_.cfg.clip_epsilon, s_.cfg.generation.temperature);
    stream_.add(t, value);
    trainer_busy_ = true;
    double end = now_ + s_.cfg.durations.train_per_trajectory;
    if (stream_.taken < s_.batch) {
      at(end, [this] {
        trainer_busy_ = false;
        trainer_try();
      });
      return;
    }
    s_.optimizer->step();
    s_.optimizer->zero_grad();
    auto res = stream_.finish();
    stream_ = {};
    end += s_.cfg.durations.train_base;
    at(end, [this, res] { train_end(res); });
  }

  void train_end(const TrainerStepResult& res) {
    log("trainer", 0, "train_end", step_payload(step_, res));
    steps_.push_back(step_metrics(step_, now_, res));
    ++step_;
    last_progress_ = now_;
    if (step_ % s_.cfg.sync_cadence == 0) {
      at(now_ + s_.cfg.durations.publish, [this] {
        const auto v = s_.server.publish(*s_.policy, step_);
        log("server", 0, "publish", {{"version", num(v)}, {"trainer_version", num(step_)}});
        after_train();
        wake_generators();
      });
      return;
    }
    after_train();
  }

  void after_train() {
    trainer_busy_ = false;
    if (step_ >= s_.cfg.total_steps) return finish();
    trainer_try();
  }

  void finish() {
    done_ = true;
    for (const auto& r : s_.queue.drain()) log("run", 0, "leftover", {{"id", num(r.id)}, {"where", kInQueue}});
    for (auto id : s_.buffer.ids()) log("run", 0, "leftover", {{"id", num(id)}, {"where", kInBuffer}});
    for (std::size_t g = 0; g < gens_.size(); ++g) {
      const auto& gen = gens_[g];
      if (!gen.held) continue;
      if (gen.blocked) {
        log("run", static_cast<std::int64_t>(g), "leftover",
            {{"id", num(gen.held->id)}, {"where", kBlocked}, {"blocked", now_ - gen.blocked_since}});
      } else {
        log("run", static_cast<std::int64_t>(g), "leftover", {{"id", num(gen.held->id)}, {"where", kGenerating}});
      }
    }
    for (std::size_t p = 0; p < pps_.size(); ++p) {
      if (pps_[p].held) {
        log("run", static_cast<std::int64_t>(p), "leftover", {{"id", num(pps_[p].held->id())}, {"where", kPostprocessing}});
      }
    }
    log("run", 0, "run_end", {{"steps", num(step_)}, {"server_version", num(s_.server.version())}});
  }

  [[noreturn]] void deadlock() {
    now_ = std::max(now_, last_progress_) + s_.cfg.deadlock_quantum;
    std::ostringstream dump;
    dump << "deadlock: no progress for " << s_.cfg.deadlock_quantum << " virtual time units\n"
         << "  time=" << now_ << " regime=" << to_string(s_.cfg.regime) << " trainer_step=" << step_ << "/"
         << s_.cfg.total_steps << " next_id=" << next_id_ << " server_version=" << s_.server.version() << "\n"
         << "  queue " << s_.queue.size() << "/" << s_.queue.capacity() << ", buffer " << s_.buffer.size() << "/"
         << s_.buffer.capacity() << " ids [";
    const auto ids = s_.buffer.ids();
    for (std::size_t i = 0; i < ids.size(); ++i) dump << (i ? "," : "") << ids[i];
    dump << "]\n  trainer " << (trainer_busy_ ? "busy" : trainer_waiting_ ? "waiting" : "idle") << "\n";
    for (std::size_t g = 0; g < gens_.size(); ++g) {
      const auto& gen = gens_[g];
      dump << "  generator " << g << ": "
           << (gen.blocked ? "blocked on queue" : gen.waiting ? "waiting for weights" : gen.held ? "generating" : "idle")
           << "\n";
    }
    for (std::size_t p = 0; p < pps_.size(); ++p) {
      dump << "  postprocessor " << p << ": " << (pps_[p].held ? "processing" : "waiting for queue") << "\n";
    }
    log("run", 0, "deadlock", {{"step", num(step_)}, {"next_id", num(next_id_)}});
    throw DeadlockError(dump.str());
  }

  Setup s_;
  std::vector<Generator> gens_;
  std::vector<Postprocessor> pps_;
  std::deque<std::size_t> blocked_;
  std::priority_queue<Scheduled, std::vector<Scheduled>, std::greater<>> events_;
  std::vector<Event> trace_;
  std::vector<StepMetrics> steps_;
  Streaming stream_;
  double now_ = 0.0;
  double last_progress_ = 0.0;
  std::uint64_t seq_ = 0;
  std::int64_t next_id_ = 0;
  std::int64_t step_ = 0;
  bool trainer_busy_ = false;
  bool trainer_waiting_ = false;
  bool wait_logged_ = false;
  bool done_ = false;
};

// ------------------------------------------------------------- real threads

class ThreadEngine {
 public:
  explicit ThreadEngine(const OrchestratorConfig& cfg) : s_(cfg), start_(std::chrono::steady_clock::now()) {}

  OrchestrationResult run() {
    const auto& cfg = s_.cfg;
    log("run", 0, "run_start",
        {{"regime", static_cast<double>(static_cast<int>(cfg.regime))},
         {"total_steps", num(cfg.total_steps)},
         {"batch", num(s_.batch)}});
    std::vector<std::thread> threads;
    for (std::int64_t g = 0; g < cfg.num_generators; ++g) {
      threads.emplace_back([this, g, model = models::clone_decoder(*s_.policy)] { generator(g, *model); });
    }
    for (std::int64_t p = 0; p < cfg.num_postprocessors; ++p) {
      threads.emplace_back([this, p, ref = models::clone_decoder(*s_.initial)] { postprocessor(p, *ref); });
    }
    std::string failure;
    try {
      trainer();
    } catch (const std::exception& e) {
      failure = e.what();
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    s_.queue.close();
    for (auto& t : threads) t.join();
    if (!failure.empty()) {
      if (deadlocked_) throw DeadlockError(failure);
      throw std::runtime_error(failure);
    }
    for (const auto& r : s_.queue.drain()) log("run", 0, "leftover", {{"id", num(r.id)}, {"where", kInQueue}});
    for (auto id : s_.buffer.ids()) log("run", 0, "leftover", {{"id", num(id)}, {"where", kInBuffer}});
    for (const auto& [id, where] : stranded_) log("run", 0, "leftover", {{"id", num(id)}, {"where", where}});
    log("run", 0, "run_end", {{"steps", num(step_)}, {"server_version", num(s_.server.version())}});

    OrchestrationResult out;
    out.trace = std::move(trace_);
    out.steps = std::move(steps_);
    out.policy = s_.policy;
    out.server_version = s_.server.version();
    return out;
  }

 private:
  double now() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  void log(const std::string& role, std::int64_t worker, const std::string& kind, Payload payload) {
    std::lock_guard<std::mutex> lock(trace_mu_);
    trace_.push_back({now(), role, worker, kind, std::move(payload)});
  }

  void generator(std::int64_t g, nn::TransformerDecoder& model) {
    std::int64_t loaded = 0;
    for (;;) {
      std::int64_t id = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return stop_ || s_.may_claim(next_id_); });
        if (stop_) return;
        id = next_id_++;
      }
      const auto snap = s_.server.fetch();
      const bool load = snap->version != loaded;
      if (load) {
        load_weights(*snap, model);
        loaded = snap->version;
      }
      log("generator", g, "fetch",
          {{"version", num(snap->version)}, {"policy_version", num(snap->trainer_version)}, {"loaded", load ? 1.0 : 0.0}});
      log("generator", g, "generate_start", {{"id", num(id)}, {"policy_version", num(snap->trainer_version)}});
      auto rollout =
          generate_rollout(model, snap->trainer_version, id, s_.prompt_for(id), s_.cfg.generation, s_.cfg.seed, now());
      log("generator", g, "generate_end", {{"id", num(id)}, {"policy_version", num(snap->trainer_version)}});
      const double t0 = now();
      bool blocked = false;
      if (!s_.queue.push(std::move(rollout), &blocked)) {
        std::lock_guard<std::mutex> lock(mu_);
        stranded_.emplace_back(id, blocked ? kBlocked : kGenerating);
        return;
      }
      if (blocked) {
        log("queue", g, "queue_blocked", {{"id", num(id)}, {"size", num(s_.queue.capacity())}});
        log("queue", g, "queue_unblocked", {{"id", num(id)}, {"blocked", now() - t0}});
      }
      log("queue", g, "queue_push", {{"id", num(id)}, {"size", num(s_.queue.size())}});
    }
  }

  void postprocessor(std::int64_t p, const nn::TransformerDecoder& reference) {
    while (auto r = s_.queue.pop()) {
      const std::int64_t id = r->id;
      log("queue", p, "queue_pop", {{"id", num(id)}, {"size", num(s_.queue.size())}});
      auto t = postprocess(std::move(*r), s_.reward, &reference, s_.cfg.generation.temperature, now());
      double mean = 0.0;
      for (float x : t.rewards) mean += x;
      mean /= static_cast<double>(t.rewards.size());
      log("postprocessor", p, "postprocess_end", {{"id", num(id)}, {"reward_mean", mean}});
      {
        std::lock_guard<std::mutex> lock(mu_);
        auto evicted = s_.buffer.add(std::move(t));
        log("buffer", p, "buffer_add", {{"id", num(id)}, {"size", num(s_.buffer.size())}});
        if (evicted) log("buffer", p, "buffer_evict", {{"id", num(evicted->id())}});
      }
      cv_.notify_all();
    }
  }

  // Waits under mu_ until `ready` holds; a stall past the watchdog limit is
  // reported as a deadlock.
  void await(std::unique_lock<std::mutex>& lock, const std::function<bool()>& ready) {
    bool logged = false;
    const auto limit = std::chrono::duration<double>(s_.cfg.thread_stall_seconds);
    while (!ready()) {
      if (!logged) {
        log("trainer", 0, "trainer_wait", {{"step", num(step_)}, {"eligible", 0.0}});
        logged = true;
      }
      if (cv_.wait_for(lock, limit) == std::cv_status::timeout && !ready()) {
        deadlocked_ = true;
        std::ostringstream dump;
        dump << "deadlock: trainer stalled for " << s_.cfg.thread_stall_seconds << " s at step " << step_
             << " (next_id=" << next_id_ << ", queue " << s_.queue.size() << "/" << s_.queue.capacity() << ", buffer "
             << s_.buffer.size() << "/" << s_.buffer.capacity() << ", server_version " << s_.server.version() << ")";
        throw DeadlockError(dump.str());
      }
    }
  }

  void consumed(const ProcessedTrajectory& t) {
    log("trainer", 0, "consume",
        {{"id", num(t.id())}, {"lag", num(step_ - t.rollout.policy_version)}, {"step", num(step_)}});
  }

  void trainer() {
    const std::int64_t b = s_.batch;
    const float temp = s_.cfg.generation.temperature;
    while (step_ < s_.cfg.total_steps) {
      std::vector<ProcessedTrajectory> batch;
      TrainerStepResult res;
      if (s_.cfg.regime == Regime::kAsyncOnPolicy) {
        Streaming stream;
        for (std::int64_t j = 0; j < b; ++j) {
          const std::int64_t id = step_ * b + j;
          std::vector<ProcessedTrajectory> one;
          {
            std::unique_lock<std::mutex> lock(mu_);
            await(lock, [&] { return s_.buffer.count_if([&](const auto& t) { return t.id() == id; }) > 0; });
            const std::int64_t ids[] = {id};
            one = s_.buffer.take_ids(ids);
          }
          const auto& t = one.front();
          if (step_ != t.rollout.policy_version) throw LagViolation("on-policy trajectory with nonzero lag");
          consumed(t);
          if (j == 0) log("trainer", 0, "train_start", {{"step", num(step_)}, {"n", num(b)}});
          stream.add(t, accumulate_trajectory(t, *s_.policy, 1.0f / static_cast<float>(b), s_.cfg.clip_epsilon, temp));
        }
        s_.optimizer->step();
        s_.optimizer->zero_grad();
        res = stream.finish();
      } else {
        {
          std::unique_lock<std::mutex> lock(mu_);
          if (s_.cfg.regime == Regime::kSync) {
            const std::int64_t lo = step_ * b;
            await(lock, [&] {
              return static_cast<std::int64_t>(s_.buffer.count_if(
                         [&](const ProcessedTrajectory& t) { return t.id() >= lo && t.id() < lo + b; })) == b;
            });
            std::vector<std::int64_t> ids(static_cast<std::size_t>(b));
            for (std::int64_t j = 0; j < b; ++j) ids[static_cast<std::size_t>(j)] = lo + j;
            batch = s_.buffer.take_ids(ids);
          } else {
            await(lock, [&] {
              for (const auto& t : s_.buffer.remove_if([&](const ProcessedTrajectory& x) {
                     return step_ - x.rollout.policy_version > s_.cfg.max_lag;
                   })) {
                log("buffer", 0, "stale_drop", {{"id", num(t.id())}, {"lag", num(step_ - t.rollout.policy_version)}});
              }
              return s_.buffer.size() > 0;
            });
            batch = s_.buffer.sample_take(static_cast<std::size_t>(b));
          }
        }
        for (const auto& t : batch) consumed(t);
        log("trainer", 0, "train_start", {{"step", num(step_)}, {"n", num(static_cast<std::int64_t>(batch.size()))}});
        res = trainer_step(batch, *s_.policy, *s_.optimizer, step_, s_.lag_bound(), s_.cfg.clip_epsilon, temp);
      }
      log("trainer", 0, "train_end", step_payload(step_, res));
      steps_.push_back(step_metrics(step_, now(), res));
      {
        std::lock_guard<std::mutex> lock(mu_);
        ++step_;
      }
      if (step_ % s_.cfg.sync_cadence == 0) {
        const auto v = s_.server.publish(*s_.policy, step_);
        log("server", 0, "publish", {{"version", num(v)}, {"trainer_version", num(step_)}});
        { std::lock_guard<std::mutex> lock(mu_); }
        cv_.notify_all();
      }
    }
  }

  Setup s_;
  const std::chrono::steady_clock::time_point start_;
  std::mutex trace_mu_;
  std::vector<Event> trace_;
  std::vector<StepMetrics> steps_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::int64_t next_id_ = 0;
  std::int64_t step_ = 0;
  bool stop_ = false;
  bool deadlocked_ = false;
  std::vector<std::pair<std::int64_t, int>> stranded_;
};

}  // namespace

OrchestrationResult run_orchestration(const OrchestratorConfig& config) {
  config.validate();
  if (config.real_threads) return ThreadEngine(config).run();
  return VirtualEngine(config).run();
}

// ------------------------------------------------------------------ report

RunReport summarize(const std::vector<Event>& trace) {
  RunReport r;
  r.num_events = static_cast<std::int64_t>(trace.size());
  if (trace.empty()) return r;
  std::map<std::int64_t, double> started;
  std::map<std::int64_t, std::int64_t> terminal;
  std::vector<double> latencies;
  bool waiting = false;
  double wait_since = 0.0;
  double first = trace.front().time, last = trace.front().time;
  auto id_of = [](const Event& e) { return static_cast<std::int64_t>(e.get("id")); };
  for (const auto& e : trace) {
    ++r.event_counts[e.kind];
    first = std::min(first, e.time);
    last = std::max(last, e.time);
    if (e.kind == "generate_start") {
      started.emplace(id_of(e), e.time);
      ++r.generated;
    } else if (e.kind == "consume") {
      ++r.consumed;
      ++terminal[id_of(e)];
      ++r.lag_distribution[static_cast<std::int64_t>(e.get("lag"))];
      if (auto it = started.find(id_of(e)); it != started.end()) latencies.push_back(e.time - it->second);
    } else if (e.kind == "buffer_evict") {
      ++r.evicted;
      ++terminal[id_of(e)];
    } else if (e.kind == "stale_drop") {
      ++r.stale_dropped;
      ++terminal[id_of(e)];
    } else if (e.kind == "leftover") {
      ++r.leftover;
      ++terminal[id_of(e)];
      r.generator_blocked_time += e.get("blocked");
    } else if (e.kind == "queue_push" || e.kind == "queue_pop") {
      const auto size = static_cast<std::int64_t>(e.get("size"));
      r.queue_occupancy.emplace_back(e.time, size);
      r.queue_high_water = std::max(r.queue_high_water, size);
    } else if (e.kind == "queue_unblocked") {
      r.generator_blocked_time += e.get("blocked");
    } else if (e.kind == "train_end") {
      r.steps.push_back({static_cast<std::int64_t>(e.get("step")), e.time, static_cast<float>(e.get("loss")),
                         static_cast<std::int64_t>(e.get("n")), e.get("reward_mean"), e.get("reward_std"),
                         static_cast<std::int64_t>(e.get("lag_min")), static_cast<std::int64_t>(e.get("lag_max"))});
    }
    if (e.kind == "trainer_wait") {
      if (!waiting) wait_since = e.time;
      waiting = true;
    } else if (waiting && (e.kind == "consume" || e.kind == "train_start")) {
      r.trainer_idle_time += e.time - wait_since;
      waiting = false;
    }
  }
  if (waiting) r.trainer_idle_time += last - wait_since;
  for (const auto& [id, n] : terminal) {
    if (n > 1) r.duplicate_consumptions += n - 1;
  }
  for (const auto& [id, t] : started) {
    if (!terminal.count(id)) ++r.unaccounted;
  }
  r.duration = last - first;
  if (r.duration > 0.0) {
    r.buffer_add_rate = static_cast<double>(r.event_counts["buffer_add"]) / r.duration;
    r.buffer_consume_rate = static_cast<double>(r.consumed) / r.duration;
  }
  if (!latencies.empty()) {
    const double top = *std::max_element(latencies.begin(), latencies.end());
    r.latency_bucket_edges.push_back(0.0);
    for (double edge = 1.0; edge <= top; edge *= 2.0) r.latency_bucket_edges.push_back(edge);
    r.latency_histogram.assign(r.latency_bucket_edges.size(), 0);
    for (double l : latencies) {
      const auto it = std::upper_bound(r.latency_bucket_edges.begin(), r.latency_bucket_edges.end(), l);
      ++r.latency_histogram[static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, it - r.latency_bucket_edges.begin() - 1))];
    }
  }
  // keep event_counts free of keys touched only by lookups above
  for (auto it = r.event_counts.begin(); it != r.event_counts.end();) {
    it = it->second == 0 ? r.event_counts.erase(it) : std::next(it);
  }
  return r;
}

namespace {

nlohmann::ordered_json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  if (v == std::floor(v) && std::fabs(v) < 9007199254740992.0) return static_cast<std::int64_t>(v);
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_trace_jsonl(const std::vector<Event>& trace, std::ostream& out) {
  for (const auto& e : trace) {
    nlohmann::ordered_json j;
    j["time"] = number(e.time);
    j["role"] = e.role;
    j["worker"] = e.worker;
    j["kind"] = e.kind;
    nlohmann::ordered_json payload = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e.payload) payload[k] = number(v);
    j["payload"] = std::move(payload);
    out << j.dump() << '\n';
  }
}

void write_report_csv(const RunReport& report, std::ostream& out) {
  out << "step,time,loss,trajectories,reward_mean,reward_std,lag_min,lag_max\n";
  for (const auto& s : report.steps) {
    out << s.step << ',' << fmt(s.time) << ',' << fmt(s.loss) << ',' << s.trajectories << ',' << fmt(s.reward_mean)
        << ',' << fmt(s.reward_std) << ',' << s.lag_min << ',' << s.lag_max << '\n';
  }
  out << "\nkey,value\n";
  out << "num_events," << report.num_events << '\n';
  for (const auto& [kind, n] : report.event_counts) out << "events." << kind << ',' << n << '\n';
  out << "generated," << report.generated << '\n'
      << "consumed," << report.consumed << '\n'
      << "evicted," << report.evicted << '\n'
      << "stale_dropped," << report.stale_dropped << '\n'
      << "leftover," << report.leftover << '\n'
      << "duplicate_consumptions," << report.duplicate_consumptions << '\n'
      << "unaccounted," << report.unaccounted << '\n';
  for (const auto& [lag, n] : report.lag_distribution) out << "lag." << lag << ',' << n << '\n';
  for (std::size_t i = 0; i < report.latency_histogram.size(); ++i) {
    out << "latency[" << fmt(report.latency_bucket_edges[i]) << ','
        << (i + 1 < report.latency_bucket_edges.size() ? fmt(report.latency_bucket_edges[i + 1]) : std::string("inf"))
        << ")," << report.latency_histogram[i] << '\n';
  }
  out << "queue_high_water," << report.queue_high_water << '\n'
      << "generator_blocked_time," << fmt(report.generator_blocked_time) << '\n'
      << "trainer_idle_time," << fmt(report.trainer_idle_time) << '\n'
      << "duration," << fmt(report.duration) << '\n'
      << "buffer_add_rate," << fmt(report.buffer_add_rate) << '\n'
      << "buffer_consume_rate," << fmt(report.buffer_consume_rate) << '\n';
}

// ------------------------------------------------------------------ config

namespace {

const ConfigNode* value(const ConfigNode& node, const std::string& key) {
  const ConfigNode* n = node.find(key);
  return n && !n->is_null() ? n : nullptr;
}

template <typename T, typename F>
void read(const ConfigNode& node, const std::string& key, T& out, F get) {
  if (const ConfigNode* n = value(node, key)) {
    try {
      out = static_cast<T>(get(*n));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

void read_int(const ConfigNode& node, const std::string& key, std::int64_t& out) {
  read(node, key, out, [](const ConfigNode& n) { return n.as_int(); });
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "output_dir",      "regime",       "max_lag",        "sync_cadence",  "num_generators",
      "num_postprocessors", "queue_capacity", "buffer_capacity", "total_steps", "rollouts_per_step",
      "seed",            "generation",   "clip_epsilon",   "optimizer",     "model",
      "prompts",         "target_token", "durations",      "real_threads",  "thread_stall_seconds",
      "deadlock_quantum"};
  return keys;
}

}  // namespace

OrchestratorConfig orchestrator_config_from(const ConfigNode& root) {
  if (!root.is_map()) throw ConfigError("async_grpo config must be a mapping");
  for (const auto& [key, node] : root.entries()) {
    if (!known_keys().count(key)) throw ConfigError("unknown async_grpo config key '" + key + "'");
  }
  Regime regime = Regime::kSync;
  if (const ConfigNode* n = value(root, "regime")) regime = regime_from_string(n->as_string());
  const std::uint64_t seed = recipes::resolve_seed(root);
  OrchestratorConfig c = toy_bandit_config(regime, seed);
  read_int(root, "max_lag", c.max_lag);
  read_int(root, "sync_cadence", c.sync_cadence);
  read_int(root, "num_generators", c.num_generators);
  read_int(root, "num_postprocessors", c.num_postprocessors);
  read_int(root, "queue_capacity", c.queue_capacity);
  read_int(root, "buffer_capacity", c.buffer_capacity);
  read_int(root, "total_steps", c.total_steps);
  read_int(root, "rollouts_per_step", c.rollouts_per_step);
  read(root, "clip_epsilon", c.clip_epsilon, [](const ConfigNode& n) { return n.as_double(); });
  read(root, "target_token", c.target_token, [](const ConfigNode& n) { return n.as_int(); });
  read(root, "real_threads", c.real_threads, [](const ConfigNode& n) { return n.as_bool(); });
  read(root, "thread_stall_seconds", c.thread_stall_seconds, [](const ConfigNode& n) { return n.as_double(); });
  read(root, "deadlock_quantum", c.deadlock_quantum, [](const ConfigNode& n) { return n.as_double(); });
  if (const ConfigNode* g = value(root, "generation")) {
    read_int(*g, "group_size", c.generation.group_size);
    read_int(*g, "max_new_tokens", c.generation.max_new_tokens);
    read(*g, "temperature", c.generation.temperature, [](const ConfigNode& n) { return n.as_double(); });
  }
  if (const ConfigNode* d = value(root, "durations")) {
    auto dbl = [](const ConfigNode& n) { return n.as_double(); };
    read(*d, "generate", c.durations.generate, dbl);
    read(*d, "postprocess", c.durations.postprocess, dbl);
    read(*d, "train_base", c.durations.train_base, dbl);
    read(*d, "train_per_trajectory", c.durations.train_per_trajectory, dbl);
    read(*d, "publish", c.durations.publish, dbl);
  }
  if (const ConfigNode* p = value(root, "prompts")) {
    if (!p->is_list()) throw ConfigError("prompts must be a list of token lists");
    c.prompts.clear();
    for (const auto& item : p->items()) {
      if (!item.is_list()) throw ConfigError("each prompt must be a list of token ids");
      std::vector<std::int32_t> tokens;
      for (const auto& t : item.items()) tokens.push_back(static_cast<std::int32_t>(t.as_int()));
      c.prompts.push_back(std::move(tokens));
    }
  }
  if (const ConfigNode* m = value(root, "model")) {
    ConfigNode node = *m;
    if (!node.is_component()) throw ConfigError("config section 'model' must set _component_");
    if (node.component() != "minitune.models.llama3") {
      throw ConfigError("async_grpo supports the minitune.models.llama3 policy, got '" + node.component() + "'");
    }
    if (!node.has("seed")) node.set("seed", ConfigNode::scalar(std::to_string(seed)));
    const auto built = config::instantiate(node, recipes::default_registry());
    c.policy = std::any_cast<std::shared_ptr<nn::TransformerDecoder>>(built)->args();
  }
  if (const ConfigNode* o = value(root, "optimizer")) {
    const auto built = config::instantiate(*o, recipes::default_registry());
    const auto* spec = std::any_cast<recipes::OptimizerSpec>(&built);
    if (!spec) throw ConfigError("config section 'optimizer' does not build an optimizer");
    if (spec->kind != optim::OptimizerKind::kAdamW) throw ConfigError("async_grpo supports the AdamW optimizer only");
    c.hyper = spec->hyper;
  }
  c.validate();
  return c;
}

OrchestrationResult run_async_grpo(const ConfigNode& raw, std::ostream* log) {
  const ConfigNode root = config::resolve_interpolations(raw);
  const OrchestratorConfig cfg = orchestrator_config_from(root);
  std::string output_dir;
  if (const ConfigNode* n = value(root, "output_dir")) output_dir = n->as_string();
  if (log) {
    *log << "async_grpo: regime=" << to_string(cfg.regime) << " steps=" << cfg.total_steps
         << " generators=" << cfg.num_generators << " postprocessors=" << cfg.num_postprocessors
         << " clock=" << (cfg.real_threads ? "threads" : "virtual") << '\n';
  }
  auto result = run_orchestration(cfg);
  const RunReport report = summarize(result.trace);
  std::ostringstream summary;
  summary << "regime," << to_string(cfg.regime) << '\n'
          << "steps," << result.steps.size() << '\n'
          << "server_version," << result.server_version << '\n'
          << "consumed," << report.consumed << '\n'
          << "max_lag_observed," << (report.lag_distribution.empty() ? 0 : report.lag_distribution.rbegin()->first)
          << '\n';
  if (!result.steps.empty()) {
    summary << "reward_first," << fmt(result.steps.front().reward_mean) << '\n'
            << "reward_last," << fmt(result.steps.back().reward_mean) << '\n';
  }
  if (log) *log << summary.str();
  if (!output_dir.empty()) {
    const std::filesystem::path dir(output_dir);
    std::filesystem::create_directories(dir);
    std::ofstream trace(dir / "trace.jsonl");
    write_trace_jsonl(result.trace, trace);
    std::ofstream csv(dir / "report.csv");
    write_report_csv(report, csv);
    std::ofstream(dir / "summary.txt") << summary.str();
    std::ofstream(dir / "config.yaml") << config::serialize(root);
    if (!trace || !csv) throw std::runtime_error("failed to write run outputs under " + output_dir);
    if (log) *log << "wrote " << (dir / "trace.jsonl").string() << ", report.csv, summary.txt\n";
  }
  return result;
}

}  // namespace minitune::grpo
