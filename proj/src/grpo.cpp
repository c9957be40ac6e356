// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "minitune/autograd.hpp"
#include "minitune/loss.hpp"
#include "minitune/ops.hpp"

namespace minitune::grpo {

RewardFn target_token_reward(std::int32_t target) {
  return [target](std::span<const std::int32_t>, std::span<const std::int32_t> response) {
    if (response.empty()) return 0.0f;
    const auto hits = std::count(response.begin(), response.end(), target);
    return static_cast<float>(hits) / static_cast<float>(response.size());
  };
}

namespace {

float effective_temperature(float t) { return t > 0.0f ? t : 1.0f; }

Tensor scaled(const Tensor& logits, float temperature) {
  const float t = effective_temperature(temperature);
  return t == 1.0f ? logits : ops::mul_scalar(logits, 1.0f / t);
}

// Uniform double in [0, 1) from the top 53 bits.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

Rollout generate_rollout(const nn::TransformerDecoder& policy, std::int64_t policy_version, std::int64_t rollout_id,
                         std::vector<std::int32_t> prompt, const GenerationOptions& options, std::uint64_t seed,
                         double created_time) {
  if (prompt.empty()) throw std::invalid_argument("generate_rollout: empty prompt");
  if (options.group_size < 1 || options.max_new_tokens < 1) {
    throw std::invalid_argument("generate_rollout: group_size and max_new_tokens must be >= 1");
  }
  const auto p = static_cast<std::int64_t>(prompt.size());
  const std::int64_t g = options.group_size;
  const std::int64_t len = options.max_new_tokens;
  if (p + len - 1 > policy.max_seq_len()) {
    throw std::invalid_argument("generate_rollout: prompt + response exceeds the policy's max_seq_len");
  }
  std::seed_seq key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(rollout_id), static_cast<std::uint32_t>(rollout_id >> 32)};
  std::mt19937_64 rng(key);

  Rollout r;
  r.id = rollout_id;
  r.policy_version = policy_version;
  r.created_time = created_time;
  r.responses.assign(static_cast<std::size_t>(g), {});
  r.logprobs.assign(static_cast<std::size_t>(g), {});

  NoGradGuard no_grad;
  const std::int64_t vocab = policy.vocab_size();
  for (std::int64_t t = 0; t < len; ++t) {
    const std::int64_t seq = p + t;
    nn::DecoderInput in;
    in.batch = g;
    in.seq = seq;
    for (std::int64_t row = 0; row < g; ++row) {
      in.tokens.insert(in.tokens.end(), prompt.begin(), prompt.end());
      const auto& resp = r.responses[static_cast<std::size_t>(row)];
      in.tokens.insert(in.tokens.end(), resp.begin(), resp.end());
    }
    const Tensor logits = policy.forward(in);
    const Tensor lp = ops::log_softmax(scaled(ops::slice(logits, 1, seq - 1, seq), options.temperature));
    const auto values = lp.to_vector();
    for (std::int64_t row = 0; row < g; ++row) {
      const float* row_lp = values.data() + row * vocab;
      std::int32_t pick = 0;
      if (options.temperature <= 0.0f) {
        pick = static_cast<std::int32_t>(std::max_element(row_lp, row_lp + vocab) - row_lp);
      } else {
        const double u = unit(rng);
        double acc = 0.0;
        pick = static_cast<std::int32_t>(vocab - 1);
        for (std::int64_t v = 0; v < vocab; ++v) {
          acc += std::exp(static_cast<double>(row_lp[v]));
          if (u < acc) {
            pick = static_cast<std::int32_t>(v);
            break;
          }
        }
      }
      r.responses[static_cast<std::size_t>(row)].push_back(pick);
      r.logprobs[static_cast<std::size_t>(row)].push_back(row_lp[pick]);
    }
  }
  r.prompt = std::move(prompt);
  return r;
}

Tensor response_logprobs(const nn::TransformerDecoder& policy, std::span<const std::int32_t> prompt,
                         const std::vector<std::vector<std::int32_t>>& responses, float temperature) {
  if (prompt.empty() || responses.empty()) throw std::invalid_argument("response_logprobs: empty prompt or group");
  const auto p = static_cast<std::int64_t>(prompt.size());
  const auto len = static_cast<std::int64_t>(responses.front().size());
  if (len == 0) throw std::invalid_argument("response_logprobs: empty response");
  const auto g = static_cast<std::int64_t>(responses.size());
  nn::DecoderInput in;
  in.batch = g;
  in.seq = p + len - 1;
  std::vector<std::int32_t> targets;
  targets.reserve(static_cast<std::size_t>(g * len));
  for (const auto& resp : responses) {
    if (static_cast<std::int64_t>(resp.size()) != len) throw std::invalid_argument("response_logprobs: ragged group");
    in.tokens.insert(in.tokens.end(), prompt.begin(), prompt.end());
    in.tokens.insert(in.tokens.end(), resp.begin(), resp.end() - 1);
    targets.insert(targets.end(), resp.begin(), resp.end());
  }
  const Tensor logits = ops::slice(policy.forward(in), 1, p - 1, p + len - 1);
  return ops::gather_last(ops::log_softmax(scaled(logits, temperature)), targets);
}

std::vector<float> group_advantages(std::span<const float> rewards, float eps_std) {
  if (rewards.empty()) return {};
  double mean = 0.0;
  for (float r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (float r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  const double denom = std::sqrt(var) + static_cast<double>(eps_std);
  std::vector<float> out;
  out.reserve(rewards.size());
  for (float r : rewards) out.push_back(static_cast<float>((r - mean) / denom));
  return out;
}

ProcessedTrajectory postprocess(Rollout rollout, const RewardFn& reward, const nn::TransformerDecoder* reference,
                                float temperature, double processed_time) {
  ProcessedTrajectory t;
  for (const auto& resp : rollout.responses) {
    t.rewards.push_back(reward(rollout.prompt, resp));
    t.masks.emplace_back(resp.size(), std::uint8_t{1});
  }
  t.advantages = group_advantages(t.rewards);
  if (reference) {
    NoGradGuard no_grad;
    const Tensor ref = response_logprobs(*reference, rollout.prompt, rollout.responses, temperature);
    const auto values = ref.to_vector();
    const std::size_t len = rollout.responses.front().size();
    for (std::size_t row = 0; row < rollout.responses.size(); ++row) {
      t.ref_logprobs.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(row * len),
                                  values.begin() + static_cast<std::ptrdiff_t>((row + 1) * len));
    }
  }
  t.processed_time = processed_time;
  t.rollout = std::move(rollout);
  return t;
}

namespace {

struct Flat {
  std::vector<float> behavior;
  std::vector<float> mask;
  std::vector<float> advantages;
  std::int64_t rows = 0;
  std::int64_t len = 0;
};

void append(Flat& f, const ProcessedTrajectory& t) {
  const auto& r = t.rollout;
  const auto len = static_cast<std::int64_t>(r.responses.front().size());
  if (f.len != 0 && f.len != len) throw std::invalid_argument("trainer batch mixes response lengths");
  f.len = len;
  for (std::size_t row = 0; row < r.responses.size(); ++row) {
    f.behavior.insert(f.behavior.end(), r.logprobs[row].begin(), r.logprobs[row].end());
    for (auto m : t.masks[row]) f.mask.push_back(m ? 1.0f : 0.0f);
    f.advantages.push_back(t.advantages[row]);
    ++f.rows;
  }
}

Tensor objective(const std::vector<const ProcessedTrajectory*>& batch, const nn::TransformerDecoder& policy,
                 float clip_epsilon, float temperature) {
  Flat f;
  std::vector<Tensor> parts;
  for (const auto* t : batch) {
    append(f, *t);
    parts.push_back(response_logprobs(policy, t->rollout.prompt, t->rollout.responses, temperature));
  }
  const Tensor new_lp = parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
  return loss::grpo_objective(new_lp, Tensor({f.rows, f.len}, std::move(f.behavior)), f.advantages,
                              Tensor({f.rows, f.len}, std::move(f.mask)), clip_epsilon);
}

}  // namespace

TrainerStepResult trainer_step(const std::vector<ProcessedTrajectory>& batch, nn::TransformerDecoder& policy,
                               optim::Optimizer& optimizer, std::int64_t trainer_version,
                               std::optional<std::int64_t> max_lag, float clip_epsilon, float temperature) {
  if (batch.empty()) throw std::invalid_argument("trainer_step: empty batch");
  TrainerStepResult out;
  out.trajectories = static_cast<std::int64_t>(batch.size());
  out.lag_min = std::numeric_limits<std::int64_t>::max();
  out.lag_max = std::numeric_limits<std::int64_t>::min();
  std::vector<const ProcessedTrajectory*> ptrs;
  double sum = 0.0, sq = 0.0;
  std::int64_t n = 0;
  for (const auto& t : batch) {
    const std::int64_t lag = trainer_version - t.rollout.policy_version;
    if (lag < 0 || (max_lag && lag > *max_lag)) {
      throw LagViolation("trajectory " + std::to_string(t.id()) + " has lag " + std::to_string(lag) +
                         (max_lag ? " (bound " + std::to_string(*max_lag) + ")" : ""));
    }
    out.lag_min = std::min(out.lag_min, lag);
    out.lag_max = std::max(out.lag_max, lag);
    for (float r : t.rewards) {
      sum += r;
      sq += static_cast<double>(r) * r;
      ++n;
    }
    ptrs.push_back(&t);
  }
  out.reward_mean = sum / static_cast<double>(n);
  out.reward_std = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - out.reward_mean * out.reward_mean));

  Tape tape;
  Tape::Scope scope(tape);
  const Tensor obj = objective(ptrs, policy, clip_epsilon, temperature);
  out.loss = obj.item();
  tape.backward(obj);
  optimizer.step();
  optimizer.zero_grad();
  return out;
}

float accumulate_trajectory(const ProcessedTrajectory& trajectory, nn::TransformerDecoder& policy, float scale,
                            float clip_epsilon, float temperature) {
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor obj = objective({&trajectory}, policy, clip_epsilon, temperature);
  const float value = obj.item();
  tape.backward(scale == 1.0f ? obj : ops::mul_scalar(obj, scale));
  return value;
}

// ------------------------------------------------------------------ buffer

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be >= 1");
}

std::optional<ProcessedTrajectory> ReplayBuffer::add(ProcessedTrajectory t) {
  std::lock_guard<std::mutex> lock(mu_);
  std::optional<ProcessedTrajectory> evicted;
  if (items_.size() >= capacity_) {
    evicted = std::move(items_.front());
    items_.pop_front();
  }
  items_.push_back(std::move(t));
  return evicted;
}

std::size_t ReplayBuffer::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return items_.size();
}

std::vector<std::int64_t> ReplayBuffer::ids() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::int64_t> out;
  for (const auto& t : items_) out.push_back(t.id());
  return out;
}

std::size_t ReplayBuffer::count_if(const std::function<bool(const ProcessedTrajectory&)>& pred) const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<std::size_t>(std::count_if(items_.begin(), items_.end(), pred));
}

std::vector<ProcessedTrajectory> ReplayBuffer::remove_if(const std::function<bool(const ProcessedTrajectory&)>& pred) {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<ProcessedTrajectory> out;
  std::deque<ProcessedTrajectory> keep;
  for (auto& t : items_) {
    if (pred(t)) out.push_back(std::move(t));
    else keep.push_back(std::move(t));
  }
  items_ = std::move(keep);
  return out;
}

std::vector<ProcessedTrajectory> ReplayBuffer::take_ids(std::span<const std::int64_t> ids) {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::deque<ProcessedTrajectory>::iterator> found;
  for (auto id : ids) {
    auto it = std::find_if(items_.begin(), items_.end(), [&](const ProcessedTrajectory& t) { return t.id() == id; });
    if (it == items_.end()) throw std::out_of_range("replay buffer has no trajectory " + std::to_string(id));
    found.push_back(it);
  }
  std::vector<ProcessedTrajectory> out;
  for (auto it : found) out.push_back(std::move(*it));
  std::deque<ProcessedTrajectory> keep;
  for (auto& t : items_) {
    if (std::find(ids.begin(), ids.end(), t.id()) == ids.end()) keep.push_back(std::move(t));
  }
  items_ = std::move(keep);
  return out;
}

std::vector<ProcessedTrajectory> ReplayBuffer::sample_take(std::size_t n) {
  std::lock_guard<std::mutex> lock(mu_);
  n = std::min(n, items_.size());
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng_)]);
  }
  std::vector<bool> taken(items_.size(), false);
  std::vector<ProcessedTrajectory> out;
  for (std::size_t i = 0; i < n; ++i) {
    taken[idx[i]] = true;
    out.push_back(std::move(items_[idx[i]]));
  }
  std::deque<ProcessedTrajectory> keep;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!taken[i]) keep.push_back(std::move(items_[i]));
  }
  items_ = std::move(keep);
  return out;
}

// ------------------------------------------------------------------ server

WeightSnapshot capture_weights(const nn::TransformerDecoder& model) {
  WeightSnapshot s;
  for (const auto& [name, p] : model.named_parameters()) s.tensors.emplace_back(name, p.value().to_vector());
  return s;
}

void load_weights(const WeightSnapshot& snapshot, nn::TransformerDecoder& model) {
  auto params = model.named_parameters();
  if (params.size() != snapshot.tensors.size()) throw std::invalid_argument("snapshot does not match model parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != snapshot.tensors[i].first) {
      throw std::invalid_argument("snapshot tensor '" + snapshot.tensors[i].first + "' does not match parameter '" +
                                  params[i].first + "'");
    }
    params[i].second.assign(snapshot.tensors[i].second);
  }
}

ParameterServer::ParameterServer(WeightSnapshot initial) {
  initial.version = 0;
  current_ = std::make_shared<const WeightSnapshot>(std::move(initial));
}

std::shared_ptr<const WeightSnapshot> ParameterServer::fetch() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_;
}

std::int64_t ParameterServer::version() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_->version;
}

ParameterServer::Staging::Staging(ParameterServer& server, std::int64_t trainer_version)
    : server_(&server), next_(std::make_unique<WeightSnapshot>()) {
  next_->trainer_version = trainer_version;
}

void ParameterServer::Staging::stage(std::string name, std::vector<float> values) {
  if (!next_) throw std::logic_error("staging already committed");
  next_->tensors.emplace_back(std::move(name), std::move(values));
}

std::int64_t ParameterServer::Staging::commit() {
  if (!next_) throw std::logic_error("staging already committed");
  std::lock_guard<std::mutex> lock(server_->mu_);
  next_->version = server_->current_->version + 1;
  const auto v = next_->version;
  server_->current_ = std::shared_ptr<const WeightSnapshot>(next_.release());
  return v;
}

ParameterServer::Staging ParameterServer::begin_publish(std::int64_t trainer_version) {
  return Staging(*this, trainer_version);
}

std::int64_t ParameterServer::publish(const nn::TransformerDecoder& model, std::int64_t trainer_version) {
  auto staging = begin_publish(trainer_version);
  for (const auto& [name, p] : model.named_parameters()) staging.stage(name, p.value().to_vector());
  return staging.commit();
}

}  // namespace minitune::grpo
