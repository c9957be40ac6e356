// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/autograd.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <unordered_map>

namespace minitune {

namespace detail {

struct Node {
  enum class Kind { kOp, kParamLeaf, kWatchLeaf };
  Kind kind = Kind::kOp;
  std::string op;
  // -1 marks an input that does not require grad.
  std::vector<std::int64_t> inputs;
  // Parameter leaves whose gradient a checkpoint segment delivers itself.
  std::vector<std::int64_t> extra_consumed;
  BackwardFn fn;
  std::weak_ptr<ParameterImpl> param;
  int pending = 0;
  bool finalized = false;
};

using ParamSink = std::function<void(const std::shared_ptr<ParameterImpl>&, Tensor)>;

class TapeImpl {
 public:
  TapeImpl() : id_(next_id()) {}

  static std::shared_ptr<ParameterImpl> param_of(const Tensor& t) { return t.param_.lock(); }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }

  std::int64_t param_leaf(const std::shared_ptr<ParameterImpl>& p) {
    auto it = param_leaves_.find(p.get());
    if (it != param_leaves_.end()) return it->second;
    Node node;
    node.kind = Node::Kind::kParamLeaf;
    node.op = "param";
    node.param = p;
    const auto id = push(std::move(node));
    param_leaves_.emplace(p.get(), id);
    return id;
  }

  std::int64_t node_for_input(const Tensor& t) {
    if (!t.requires_grad_) return -1;
    if (auto p = t.param_.lock()) return param_leaf(p);
    if (t.tape_id_ == id_ && t.node_ >= 0 && t.node_ < static_cast<std::int64_t>(nodes_.size())) return t.node_;
    throw std::logic_error("tensor requiring grad was recorded on a different (or reset) tape");
  }

  std::int64_t push(Node node) {
    if (consumed_) throw std::logic_error("tape already consumed by backward(); reset() before recording");
    nodes_.push_back(std::move(node));
    return static_cast<std::int64_t>(nodes_.size()) - 1;
  }

  Tensor link(Tensor out, std::int64_t id) {
    out.requires_grad_ = true;
    out.node_ = id;
    out.tape_id_ = id_;
    out.param_.reset();
    return out;
  }

  void accumulate(std::int64_t id, const Tensor& g) {
    if (!g.defined()) return;
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.defined() && slot.shape() != g.shape()) {
      throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match " + shape_str(slot.shape()));
    }
    if (nodes_[static_cast<std::size_t>(id)].kind == Node::Kind::kParamLeaf) {
      if (!slot.defined()) {
        slot = g.clone(AllocTag::kGradient);
      } else {
        auto dst = slot.mutable_data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      return;
    }
    if (!slot.defined()) {
      slot = g.detach();
      return;
    }
    std::vector<float> sum(slot.data().begin(), slot.data().end());
    auto src = g.data();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += src[i];
    slot = Tensor(slot.shape(), std::move(sum));
  }

  void consumer_done(std::int64_t id) {
    if (id < 0) return;
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.kind != Node::Kind::kParamLeaf || node.finalized) return;
    if (--node.pending == 0) finalize_leaf(id);
  }

  void finalize_leaf(std::int64_t id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.finalized = true;
    Tensor g = std::move(grads_[static_cast<std::size_t>(id)]);
    grads_[static_cast<std::size_t>(id)] = Tensor();
    if (!g.defined()) return;
    auto p = node.param.lock();
    if (!p) return;
    if (param_sink_) {
      param_sink_(p, std::move(g));
      return;
    }
    Parameter handle = Parameter::from_impl(p);
    handle.accumulate_grad(std::move(g));
    if (p->hook) p->hook(handle);
  }

  void deliver_param_grad(std::int64_t leaf, const Tensor& g) {
    accumulate(leaf, g);
    consumer_done(leaf);
  }

  void run_backward(const Tensor& output, const Tensor& grad_output) {
    if (consumed_) throw std::logic_error("backward() called twice without reset()");
    if (in_backward_) throw std::logic_error("re-entrant backward() on the same tape");
    if (!output.requires_grad_ || output.tape_id_ != id_ || output.node_ < 0) {
      throw std::invalid_argument("backward(): output was not recorded on this tape");
    }
    if (grad_output.shape() != output.shape()) {
      throw ShapeError("backward(): seed gradient " + shape_str(grad_output.shape()) + " does not match output " +
                       shape_str(output.shape()));
    }
    in_backward_ = true;
    struct Exit {
      TapeImpl* t;
      ~Exit() {
        t->in_backward_ = false;
        t->consumed_ = true;
      }
    } exit{this};
    NoGradGuard no_grad;
    grads_.resize(nodes_.size());
    accumulate(output.node_, grad_output);

    for (auto i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      switch (node.kind) {
        case Node::Kind::kOp: {
          Tensor g = std::move(grads_[static_cast<std::size_t>(i)]);
          grads_[static_cast<std::size_t>(i)] = Tensor();
          BackwardFn fn = std::move(node.fn);
          node.fn = nullptr;
          if (g.defined() && fn) {
            auto in_grads = fn(g);
            fn = nullptr;
            if (in_grads.size() != node.inputs.size()) {
              throw std::logic_error("backward of '" + node.op + "' returned " + std::to_string(in_grads.size()) +
                                     " gradients for " + std::to_string(node.inputs.size()) + " inputs");
            }
            for (std::size_t j = 0; j < node.inputs.size(); ++j) {
              if (node.inputs[j] >= 0) accumulate(node.inputs[j], in_grads[j]);
            }
            in_grads.clear();
            for (auto in : node.inputs) consumer_done(in);
          } else {
            fn = nullptr;
            for (auto in : node.inputs) consumer_done(in);
            for (auto in : node.extra_consumed) consumer_done(in);
          }
          break;
        }
        case Node::Kind::kParamLeaf:
          if (!node.finalized) finalize_leaf(i);
          break;
        case Node::Kind::kWatchLeaf:
          break;
      }
    }
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    param_leaves_.clear();
    consumed_ = false;
    id_ = next_id();
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const ParameterImpl*, std::int64_t> param_leaves_;
  bool consumed_ = false;
  bool in_backward_ = false;
  ParamSink param_sink_;
};

}  // namespace detail

namespace {

thread_local detail::TapeImpl* t_tape = nullptr;
thread_local bool t_grad_enabled = true;
thread_local bool t_in_replay = false;
thread_local std::vector<std::shared_ptr<detail::ParameterImpl>>* t_collector = nullptr;

std::atomic<int> g_deterministic{-1};

struct ReplayGuard {
  bool previous = t_in_replay;
  ReplayGuard() { t_in_replay = true; }
  ~ReplayGuard() { t_in_replay = previous; }
};

struct CollectorScope {
  std::vector<std::shared_ptr<detail::ParameterImpl>>* previous = t_collector;
  explicit CollectorScope(std::vector<std::shared_ptr<detail::ParameterImpl>>* c) { t_collector = c; }
  ~CollectorScope() { t_collector = previous; }
};

std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (auto d : t.shape()) mix(&d, sizeof(d));
  auto data = t.data();
  mix(data.data(), data.size() * sizeof(float));
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter

Parameter::Parameter(std::string name, Tensor init, bool trainable) {
  if (t_in_replay) throw std::logic_error("checkpoint replay must not construct Parameters (" + name + ")");
  if (!init.defined()) throw std::invalid_argument("Parameter '" + name + "' initialized with an undefined tensor");
  impl_ = std::make_shared<detail::ParameterImpl>();
  impl_->name = std::move(name);
  impl_->value = init.clone(AllocTag::kParameter);
  impl_->value.requires_grad_ = trainable;
  impl_->value.param_ = impl_;
}

Parameter Parameter::from_impl(std::shared_ptr<detail::ParameterImpl> impl) {
  Parameter p;
  p.impl_ = std::move(impl);
  return p;
}

void Parameter::assign(std::span<const float> values) {
  auto dst = impl_->value.mutable_data();
  if (values.size() != dst.size()) {
    throw ShapeError("assign to '" + impl_->name + "': expected " + std::to_string(dst.size()) + " values, got " +
                     std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), dst.begin());
}

void Parameter::accumulate_grad(Tensor g) {
  if (g.shape() != shape()) {
    throw ShapeError("gradient " + shape_str(g.shape()) + " for parameter '" + name() + "' of shape " +
                     shape_str(shape()));
  }
  auto& grad = impl_->grad;
  if (!grad.defined()) {
    const bool reusable = g.use_count() == 1 && g.storage_->tracked.tag() == AllocTag::kGradient;
    grad = reusable ? g.detach() : g.clone(AllocTag::kGradient);
    return;
  }
  auto dst = grad.mutable_data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Parameter::register_post_accumulate_grad_hook(GradHook hook) {
  if (impl_->hook) {
    throw std::logic_error("parameter '" + name() + "' already has a post-accumulate-grad hook");
  }
  impl_->hook = std::move(hook);
}

// ---------------------------------------------------------------------------
// Grad mode

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }

bool deterministic_mode() {
  int v = g_deterministic.load();
  if (v < 0) {
    const char* env = std::getenv("MINITUNE_DETERMINISTIC");
    v = (env != nullptr && std::strcmp(env, "0") == 0) ? 0 : 1;
    g_deterministic.store(v);
  }
  return v == 1;
}

void set_deterministic_mode(bool enabled) { g_deterministic.store(enabled ? 1 : 0); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : impl_(std::make_unique<detail::TapeImpl>()) {}
Tape::~Tape() {
  if (t_tape == impl_.get()) t_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(t_tape) { t_tape = tape.impl_.get(); }
Tape::Scope::~Scope() { t_tape = previous_; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward(): loss must be a scalar, got shape " + shape_str(loss.shape()));
  impl_->run_backward(loss, Tensor::full(loss.shape(), 1.0f));
}

void Tape::backward(const Tensor& output, const Tensor& grad_output) { impl_->run_backward(output, grad_output); }

Tensor Tape::watch(const Tensor& t) {
  detail::Node node;
  node.kind = detail::Node::Kind::kWatchLeaf;
  node.op = "watch";
  const auto id = impl_->push(std::move(node));
  return impl_->link(t.detach(), id);
}

Tensor Tape::grad(const Tensor& watched) const {
  if (watched.tape_id_ != impl_->id_ || watched.node_ < 0) {
    throw std::invalid_argument("grad(): tensor is not a leaf watched on this tape");
  }
  const auto i = static_cast<std::size_t>(watched.node_);
  if (impl_->nodes_[i].kind != detail::Node::Kind::kWatchLeaf) {
    throw std::invalid_argument("grad(): tensor is not a watched leaf");
  }
  return i < impl_->grads_.size() ? impl_->grads_[i] : Tensor();
}

void Tape::reset() { impl_->reset(); }
std::size_t Tape::num_nodes() const { return impl_->nodes_.size(); }
bool Tape::consumed() const { return impl_->consumed_; }
std::uint64_t Tape::id() const { return impl_->id_; }

// ---------------------------------------------------------------------------
// Recording

Tensor record_op(std::string_view op, Tensor out, const std::vector<Tensor>& inputs, BackwardFn backward) {
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  detail::TapeImpl* tape = t_tape;
  if (!any) return out.detach();
  if (!t_grad_enabled || tape == nullptr) {
    if (t_collector != nullptr) {
      for (const auto& in : inputs) {
        if (!in.requires_grad()) continue;
        if (auto p = detail::TapeImpl::param_of(in)) {
          bool seen = false;
          for (const auto& q : *t_collector) seen = seen || q == p;
          if (!seen) t_collector->push_back(std::move(p));
        }
      }
    }
    return out.detach();
  }
  detail::Node node;
  node.op = std::string(op);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    const auto id = tape->node_for_input(in);
    if (id >= 0) ++tape->nodes_[static_cast<std::size_t>(id)].pending;
    node.inputs.push_back(id);
  }
  node.fn = std::move(backward);
  const auto id = tape->push(std::move(node));
  return tape->link(std::move(out), id);
}

// ---------------------------------------------------------------------------
// Activation checkpointing

namespace {
struct CheckpointState {
  ReplayFn replay;
  std::vector<Tensor> inputs;
  std::vector<std::shared_ptr<detail::ParameterImpl>> params;
  std::vector<std::int64_t> leaves;
  std::vector<bool> delivered;
  std::uint64_t hash = 0;
  detail::TapeImpl* tape = nullptr;
};
}  // namespace

Tensor checkpoint_segment(ReplayFn replay, std::vector<Tensor> inputs) {
  detail::TapeImpl* tape = t_tape;
  if (tape == nullptr || !t_grad_enabled) {
    ReplayGuard replaying;
    return replay(inputs);
  }

  auto state = std::make_shared<CheckpointState>();
  Tensor out;
  {
    NoGradGuard no_grad;
    CollectorScope collect(&state->params);
    ReplayGuard replaying;
    out = replay(inputs);
  }
  bool any = !state->params.empty();
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;

  if (deterministic_mode()) state->hash = hash_tensor(out);
  state->replay = std::move(replay);
  state->tape = tape;

  detail::Node node;
  node.op = "checkpoint";
  for (const auto& in : inputs) {
    const auto id = tape->node_for_input(in);
    if (id >= 0) ++tape->nodes_[static_cast<std::size_t>(id)].pending;
    node.inputs.push_back(id);
  }
  for (const auto& p : state->params) {
    const auto leaf = tape->param_leaf(p);
    ++tape->nodes_[static_cast<std::size_t>(leaf)].pending;
    state->leaves.push_back(leaf);
    node.extra_consumed.push_back(leaf);
  }
  state->delivered.assign(state->params.size(), false);
  state->inputs = std::move(inputs);

  node.fn = [state](const Tensor& grad_out) -> std::vector<Tensor> {
    Tape sub;
    sub.impl().param_sink_ = [&state](const std::shared_ptr<detail::ParameterImpl>& p, Tensor g) {
      for (std::size_t k = 0; k < state->params.size(); ++k) {
        if (state->params[k] == p) {
          state->delivered[k] = true;
          state->tape->deliver_param_grad(state->leaves[k], g);
          return;
        }
      }
      throw std::logic_error("checkpoint replay touched parameter '" + p->name + "' not seen during forward");
    };
    std::vector<Tensor> local;
    Tensor replayed;
    {
      Tape::Scope scope(sub);
      EnableGradGuard enable;
      ReplayGuard replaying;
      local.reserve(state->inputs.size());
      for (const auto& in : state->inputs) local.push_back(in.requires_grad() ? sub.watch(in) : in.detach());
      replayed = state->replay(local);
    }
    if (state->hash != 0 && hash_tensor(replayed) != state->hash) {
      throw std::runtime_error("checkpoint replay is not deterministic: recomputed output differs from forward");
    }
    if (replayed.requires_grad()) sub.backward(replayed, grad_out);
    for (std::size_t k = 0; k < state->params.size(); ++k) {
      if (!state->delivered[k]) state->tape->consumer_done(state->leaves[k]);
    }
    std::vector<Tensor> grads(state->inputs.size());
    for (std::size_t i = 0; i < state->inputs.size(); ++i) {
      if (state->inputs[i].requires_grad()) grads[i] = sub.grad(local[i]);
    }
    return grads;
  };
  const auto id = tape->push(std::move(node));
  return tape->link(std::move(out), id);
}

}  // namespace minitune
