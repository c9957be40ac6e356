// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace minitune::optim {

void AdamWHyper::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("AdamW: " + what); };
  if (!(lr >= 0.0f) || !std::isfinite(lr)) fail("lr must be a finite value >= 0, got " + std::to_string(lr));
  if (!(beta1 > 0.0f && beta1 < 1.0f)) fail("beta1 must lie in (0, 1), got " + std::to_string(beta1));
  if (!(beta2 > 0.0f && beta2 < 1.0f)) fail("beta2 must lie in (0, 1), got " + std::to_string(beta2));
  if (!(eps > 0.0f)) fail("eps must be > 0, got " + std::to_string(eps));
  if (!(weight_decay >= 0.0f)) fail("weight_decay must be >= 0, got " + std::to_string(weight_decay));
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdamW ? "AdamW" : "AdamW8bit"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "AdamW") return OptimizerKind::kAdamW;
  if (name == "AdamW8bit") return OptimizerKind::kAdamW8bit;
  throw std::invalid_argument("unknown optimizer kind '" + name + "'");
}

namespace {

void check_grad(const Parameter& param, const Tensor& grad) {
  if (!grad.defined()) throw std::invalid_argument("parameter '" + param.name() + "' has no gradient");
  if (grad.shape() != param.shape()) {
    throw ShapeError("gradient shape " + shape_str(grad.shape()) + " does not match parameter '" + param.name() +
                     "' shape " + shape_str(param.shape()));
  }
  auto g = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw std::domain_error("non-finite gradient in parameter '" + param.name() + "' at element " +
                              std::to_string(i));
    }
  }
}

struct BiasCorrection {
  float bc1;
  float bc2;
};

BiasCorrection bias_correction(const AdamWHyper& h, std::int64_t step) {
  const double t = static_cast<double>(step);
  return {static_cast<float>(1.0 - std::pow(static_cast<double>(h.beta1), t)),
          static_cast<float>(1.0 - std::pow(static_cast<double>(h.beta2), t))};
}

void apply_decay(std::span<float> theta, const AdamWHyper& h) {
  if (h.weight_decay == 0.0f) return;
  const float keep = 1.0f - h.lr * h.weight_decay;
  for (float& x : theta) x *= keep;
}

template <typename T>
StateBuffer to_buffer(const std::vector<T>& values, const char* dtype) {
  StateBuffer b;
  b.dtype = dtype;
  b.shape = {static_cast<std::int64_t>(values.size())};
  b.bytes.resize(values.size() * sizeof(T));
  if (!values.empty()) std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
  return b;
}

template <typename T>
std::vector<T> from_buffer(const ParamStateRecord& rec, const std::string& key, const char* dtype,
                           std::int64_t expected, const std::string& param) {
  auto it = rec.buffers.find(key);
  if (it == rec.buffers.end()) throw std::invalid_argument("optimizer state for '" + param + "' lacks buffer '" + key + "'");
  const auto& b = it->second;
  if (b.dtype != dtype || b.bytes.size() != static_cast<std::size_t>(expected) * sizeof(T)) {
    throw std::invalid_argument("optimizer state buffer '" + key + "' of '" + param + "' has dtype " + b.dtype + " and " +
                                std::to_string(b.bytes.size()) + " bytes, expected " + dtype + " with " +
                                std::to_string(expected * static_cast<std::int64_t>(sizeof(T))));
  }
  std::vector<T> out(static_cast<std::size_t>(expected));
  if (expected > 0) std::memcpy(out.data(), b.bytes.data(), b.bytes.size());
  return out;
}

}  // namespace

void adamw_step(Parameter& param, const Tensor& grad, AdamWState& state, const AdamWHyper& hyper) {
  check_grad(param, grad);
  if (!state.m.defined()) {
    state.m = Tensor::zeros(param.shape(), AllocTag::kOptimizerState);
    state.v = Tensor::zeros(param.shape(), AllocTag::kOptimizerState);
  }
  if (state.m.shape() != param.shape()) {
    throw ShapeError("optimizer state shape " + shape_str(state.m.shape()) + " does not match parameter '" +
                     param.name() + "'");
  }
  ++state.step_count;
  const auto [bc1, bc2] = bias_correction(hyper, state.step_count);
  auto theta = param.mutable_data();
  auto g = grad.data();
  auto m = state.m.mutable_data();
  auto v = state.v.mutable_data();
  apply_decay(theta, hyper);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = hyper.beta1 * m[i] + (1.0f - hyper.beta1) * g[i];
    v[i] = hyper.beta2 * v[i] + (1.0f - hyper.beta2) * g[i] * g[i];
    const float m_hat = m[i] / bc1;
    const float v_hat = v[i] / bc2;
    theta[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

QuantizedMoment::QuantizedMoment(std::int64_t numel, bool is_signed)
    : numel_(numel),
      signed_(is_signed),
      codes_(static_cast<std::size_t>(numel), 0),
      scales_(static_cast<std::size_t>((numel + kQuantBlock - 1) / kQuantBlock), 0.0f),
      tracked_(static_cast<std::int64_t>(codes_.size() + scales_.size() * sizeof(float)), AllocTag::kOptimizerState) {}

std::int64_t QuantizedMoment::payload_bytes() const {
  return static_cast<std::int64_t>(codes_.size() + scales_.size() * sizeof(float));
}

void QuantizedMoment::quantize(std::span<const float> values) {
  if (static_cast<std::int64_t>(values.size()) != numel_) {
    throw std::invalid_argument("quantize: expected " + std::to_string(numel_) + " values, got " +
                                std::to_string(values.size()));
  }
  for (std::size_t b = 0; b < scales_.size(); ++b) {
    const std::size_t lo = b * kQuantBlock;
    const std::size_t hi = std::min(values.size(), lo + kQuantBlock);
    float absmax = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::abs(values[i]));
    scales_[b] = absmax;
    for (std::size_t i = lo; i < hi; ++i) {
      if (absmax == 0.0f) {
        codes_[i] = 0;
      } else if (signed_) {
        const float q = std::clamp(std::nearbyint(values[i] / absmax * 127.0f), -127.0f, 127.0f);
        codes_[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(q));
      } else {
        const float q = std::clamp(std::ceil(std::max(values[i], 0.0f) / absmax * 255.0f), 0.0f, 255.0f);
        codes_[i] = static_cast<std::uint8_t>(q);
      }
    }
  }
}

void QuantizedMoment::dequantize(std::span<float> out) const {
  if (static_cast<std::int64_t>(out.size()) != numel_) {
    throw std::invalid_argument("dequantize: expected " + std::to_string(numel_) + " slots, got " +
                                std::to_string(out.size()));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float scale = scales_[i / kQuantBlock];
    if (signed_) {
      out[i] = static_cast<float>(static_cast<std::int8_t>(codes_[i])) * scale / 127.0f;
    } else {
      out[i] = static_cast<float>(codes_[i]) * scale / 255.0f;
    }
  }
}

void QuantizedMoment::load(std::vector<std::uint8_t> codes, std::vector<float> scales) {
  if (codes.size() != codes_.size() || scales.size() != scales_.size()) {
    throw std::invalid_argument("quantized moment size mismatch on load");
  }
  codes_ = std::move(codes);
  scales_ = std::move(scales);
}

void adamw8bit_step(Parameter& param, const Tensor& grad, AdamW8bitState& state, const AdamWHyper& hyper) {
  check_grad(param, grad);
  const std::int64_t n = param.numel();
  if (state.m.numel() != n) {
    state.m = QuantizedMoment(n, true);
    state.sqrt_v = QuantizedMoment(n, false);
  }
  std::vector<float> m(static_cast<std::size_t>(n)), s(static_cast<std::size_t>(n));
  state.m.dequantize(m);
  state.sqrt_v.dequantize(s);
  ++state.step_count;
  const auto [bc1, bc2] = bias_correction(hyper, state.step_count);
  auto theta = param.mutable_data();
  auto g = grad.data();
  apply_decay(theta, hyper);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = hyper.beta1 * m[i] + (1.0f - hyper.beta1) * g[i];
    const float v = hyper.beta2 * s[i] * s[i] + (1.0f - hyper.beta2) * g[i] * g[i];
    s[i] = std::sqrt(v);
    const float m_hat = m[i] / bc1;
    const float v_hat = v / bc2;
    theta[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
  state.m.quantize(m);
  state.sqrt_v.quantize(s);
}

ParamOptimizer::ParamOptimizer(Parameter param, OptimizerKind kind) : param_(std::move(param)), kind_(kind) {}

void ParamOptimizer::step(const Tensor& grad, const AdamWHyper& hyper) {
  if (kind_ == OptimizerKind::kAdamW) {
    if (!full_) full_.emplace();
    adamw_step(param_, grad, *full_, hyper);
  } else {
    if (!quant_) quant_.emplace();
    adamw8bit_step(param_, grad, *quant_, hyper);
  }
}

std::int64_t ParamOptimizer::step_count() const {
  if (full_) return full_->step_count;
  if (quant_) return quant_->step_count;
  return 0;
}

std::int64_t ParamOptimizer::state_bytes() const {
  if (full_ && full_->m.defined()) return full_->m.nbytes() + full_->v.nbytes();
  if (quant_) return quant_->m.payload_bytes() + quant_->sqrt_v.payload_bytes();
  return 0;
}

ParamStateRecord ParamOptimizer::save() const {
  ParamStateRecord rec;
  rec.step = step_count();
  if (full_ && full_->m.defined()) {
    rec.buffers["exp_avg"] = to_buffer(full_->m.to_vector(), "f32");
    rec.buffers["exp_avg_sq"] = to_buffer(full_->v.to_vector(), "f32");
    rec.buffers["exp_avg"].shape = param_.shape();
    rec.buffers["exp_avg_sq"].shape = param_.shape();
  } else if (quant_ && quant_->m.numel() > 0) {
    rec.buffers["exp_avg.codes"] = to_buffer(quant_->m.codes(), "u8");
    rec.buffers["exp_avg.scales"] = to_buffer(quant_->m.scales(), "f32");
    rec.buffers["exp_avg_sq_sqrt.codes"] = to_buffer(quant_->sqrt_v.codes(), "u8");
    rec.buffers["exp_avg_sq_sqrt.scales"] = to_buffer(quant_->sqrt_v.scales(), "f32");
  }
  return rec;
}

void ParamOptimizer::load(const ParamStateRecord& rec) {
  full_.reset();
  quant_.reset();
  if (rec.step < 0) throw std::invalid_argument("negative step count for '" + param_.name() + "'");
  if (rec.step == 0 && rec.buffers.empty()) return;
  const std::int64_t n = param_.numel();
  const std::string& name = param_.name();
  if (kind_ == OptimizerKind::kAdamW) {
    AdamWState st;
    st.m = Tensor(param_.shape(), from_buffer<float>(rec, "exp_avg", "f32", n, name), AllocTag::kOptimizerState);
    st.v = Tensor(param_.shape(), from_buffer<float>(rec, "exp_avg_sq", "f32", n, name), AllocTag::kOptimizerState);
    st.step_count = rec.step;
    full_ = std::move(st);
  } else {
    const std::int64_t blocks = (n + kQuantBlock - 1) / kQuantBlock;
    quant_.emplace();
    quant_->m = QuantizedMoment(n, true);
    quant_->sqrt_v = QuantizedMoment(n, false);
    quant_->m.load(from_buffer<std::uint8_t>(rec, "exp_avg.codes", "u8", n, name),
                   from_buffer<float>(rec, "exp_avg.scales", "f32", blocks, name));
    quant_->sqrt_v.load(from_buffer<std::uint8_t>(rec, "exp_avg_sq_sqrt.codes", "u8", n, name),
                        from_buffer<float>(rec, "exp_avg_sq_sqrt.scales", "f32", blocks, name));
    quant_->step_count = rec.step;
  }
}

namespace {

template <typename Slots, typename Get>
OptimizerStateDict save_slots(OptimizerKind kind, const Slots& slots, Get get) {
  OptimizerStateDict out;
  out.optimizer = to_string(kind);
  for (const auto& s : slots) out.params[get(s).param().name()] = get(s).save();
  return out;
}

template <typename Slots, typename Get>
void load_slots(OptimizerKind kind, Slots& slots, Get get, const OptimizerStateDict& state) {
  if (state.optimizer != to_string(kind)) {
    throw std::invalid_argument("optimizer state was saved by " + state.optimizer + ", loading into " + to_string(kind));
  }
  std::vector<std::string> missing, unknown;
  std::map<std::string, bool> known;
  for (auto& s : slots) {
    known[get(s).param().name()] = true;
    if (!state.params.count(get(s).param().name())) missing.push_back(get(s).param().name());
  }
  for (const auto& [name, rec] : state.params) {
    if (!known.count(name)) unknown.push_back(name);
  }
  if (!missing.empty() || !unknown.empty()) {
    std::ostringstream os;
    os << "optimizer state does not match parameters;";
    if (!missing.empty()) {
      os << " missing:";
      for (const auto& n : missing) os << ' ' << n;
      if (!unknown.empty()) os << ';';
    }
    if (!unknown.empty()) {
      os << " unknown:";
      for (const auto& n : unknown) os << ' ' << n;
    }
    throw std::invalid_argument(os.str());
  }
  for (auto& s : slots) get(s).load(state.params.at(get(s).param().name()));
}

std::vector<std::pair<std::string, Parameter>> trainable_only(const nn::NamedParameters& params) {
  std::vector<std::pair<std::string, Parameter>> out;
  std::map<std::string, bool> seen;
  for (const auto& [name, p] : params) {
    if (!p.trainable()) continue;
    if (seen.count(p.name())) throw std::invalid_argument("duplicate parameter name '" + p.name() + "'");
    seen[p.name()] = true;
    out.emplace_back(name, p);
  }
  return out;
}

}  // namespace

Optimizer::Optimizer(const nn::NamedParameters& params, AdamWHyper hyper, OptimizerKind kind)
    : hyper_(hyper), kind_(kind) {
  hyper_.validate();
  for (const auto& [name, p] : trainable_only(params)) slots_.emplace_back(p, kind);
}

void Optimizer::step() {
  for (auto& s : slots_) {
    if (s.param().has_grad()) s.step(s.param().grad(), hyper_);
  }
}

void Optimizer::zero_grad() {
  for (auto& s : slots_) {
    Parameter p = s.param();
    p.clear_grad();
  }
}

std::int64_t Optimizer::state_bytes() const {
  std::int64_t total = 0;
  for (const auto& s : slots_) total += s.state_bytes();
  return total;
}

OptimizerStateDict Optimizer::state_dict() const {
  return save_slots(kind_, slots_, [](const ParamOptimizer& s) -> const ParamOptimizer& { return s; });
}

void Optimizer::load_state_dict(const OptimizerStateDict& state) {
  load_slots(kind_, slots_, [](ParamOptimizer& s) -> ParamOptimizer& { return s; }, state);
}

double clip_grad_norm(const std::vector<Parameter>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad().data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float coef = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      Tensor g = p.grad();
      for (float& x : g.mutable_data()) x *= coef;
    }
  }
  return norm;
}

std::unique_ptr<InBackwardOptimizer> InBackwardOptimizer::attach(const nn::NamedParameters& params, AdamWHyper hyper,
                                                                 OptimizerKind kind,
                                                                 std::int64_t gradient_accumulation_steps) {
  if (gradient_accumulation_steps != 1) {
    throw std::invalid_argument(
        "optimizer_in_bwd requires gradient_accumulation_steps == 1 (got " +
        std::to_string(gradient_accumulation_steps) + "): partial updates would be applied before accumulation ends");
  }
  hyper.validate();
  auto trainable = trainable_only(params);
  for (const auto& [name, p] : trainable) {
    if (p.has_hook()) throw std::invalid_argument("parameter '" + p.name() + "' already has a grad hook");
  }
  std::unique_ptr<InBackwardOptimizer> opt(new InBackwardOptimizer(hyper, kind));
  for (const auto& [name, p] : trainable) {
    opt->slots_.push_back(std::make_unique<ParamOptimizer>(p, kind));
    ParamOptimizer* slot = opt->slots_.back().get();
    InBackwardOptimizer* self = opt.get();
    Parameter handle = p;
    handle.register_post_accumulate_grad_hook([self, slot](Parameter& param) {
      slot->step(param.grad(), self->hyper_);
      param.clear_grad();
      ++self->updates_;
    });
  }
  return opt;
}

InBackwardOptimizer::~InBackwardOptimizer() {
  for (auto& s : slots_) {
    Parameter p = s->param();
    p.remove_hook();
  }
}

std::int64_t InBackwardOptimizer::state_bytes() const {
  std::int64_t total = 0;
  for (const auto& s : slots_) total += s->state_bytes();
  return total;
}

OptimizerStateDict InBackwardOptimizer::state_dict() const {
  return save_slots(kind_, slots_, [](const std::unique_ptr<ParamOptimizer>& s) -> const ParamOptimizer& { return *s; });
}

void InBackwardOptimizer::load_state_dict(const OptimizerStateDict& state) {
  load_slots(kind_, slots_, [](std::unique_ptr<ParamOptimizer>& s) -> ParamOptimizer& { return *s; }, state);
}

}  // namespace minitune::optim
