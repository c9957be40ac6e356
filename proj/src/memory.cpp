// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/memory.hpp"

#include <algorithm>
#include <stdexcept>

namespace minitune {

namespace {
thread_local std::shared_ptr<MemoryMeter> t_meter;
}  // namespace

std::string_view to_string(AllocTag tag) {
  switch (tag) {
    case AllocTag::kActivation: return "activation";
    case AllocTag::kParameter: return "parameter";
    case AllocTag::kGradient: return "gradient";
    case AllocTag::kLogits: return "logits";
    case AllocTag::kOptimizerState: return "optimizer_state";
  }
  return "unknown";
}

void MemoryMeter::on_alloc(AllocTag tag, std::int64_t bytes) {
  std::lock_guard<std::mutex> lock(mu_);
  const auto i = static_cast<std::size_t>(tag);
  live_ += bytes;
  live_by_tag_[i] += bytes;
  peak_ = std::max(peak_, live_);
  peak_by_tag_[i] = std::max(peak_by_tag_[i], live_by_tag_[i]);
  if (!phase_.empty()) {
    auto& p = phase_peaks_[phase_];
    p = std::max(p, live_);
  }
  ++allocs_;
}

void MemoryMeter::on_free(AllocTag tag, std::int64_t bytes) {
  std::lock_guard<std::mutex> lock(mu_);
  const auto i = static_cast<std::size_t>(tag);
  live_ -= bytes;
  live_by_tag_[i] -= bytes;
  if (live_ < 0 || live_by_tag_[i] < 0) {
    throw std::logic_error("MemoryMeter: live bytes went negative");
  }
  ++frees_;
}

std::string MemoryMeter::enter_phase(const std::string& phase) {
  std::lock_guard<std::mutex> lock(mu_);
  std::string previous = phase_;
  phase_ = phase;
  auto& p = phase_peaks_[phase_];
  p = std::max(p, live_);
  return previous;
}

void MemoryMeter::restore_phase(const std::string& previous) {
  std::lock_guard<std::mutex> lock(mu_);
  phase_ = previous;
}

MemorySnapshot MemoryMeter::snapshot() const {
  std::lock_guard<std::mutex> lock(mu_);
  MemorySnapshot s;
  s.live_bytes = live_;
  s.peak_bytes = peak_;
  s.live_by_tag = live_by_tag_;
  s.peak_by_tag = peak_by_tag_;
  s.phase_peaks = phase_peaks_;
  s.num_allocations = allocs_;
  s.num_frees = frees_;
  return s;
}

void MemoryMeter::reset_peaks() {
  std::lock_guard<std::mutex> lock(mu_);
  peak_ = live_;
  peak_by_tag_ = live_by_tag_;
  phase_peaks_.clear();
  if (!phase_.empty()) phase_peaks_[phase_] = live_;
}

std::shared_ptr<MemoryMeter> active_meter() { return t_meter; }

MemorySnapshot memory_report() {
  if (!t_meter) return {};
  return t_meter->snapshot();
}

MemoryScope::MemoryScope(std::shared_ptr<MemoryMeter> meter) : previous_(std::move(t_meter)) {
  t_meter = std::move(meter);
}

MemoryScope::~MemoryScope() { t_meter = std::move(previous_); }

PhaseScope::PhaseScope(const std::string& phase) : meter_(t_meter) {
  if (meter_) previous_ = meter_->enter_phase(phase);
}

PhaseScope::~PhaseScope() {
  if (meter_) meter_->restore_phase(previous_);
}

TrackedBytes::TrackedBytes(std::int64_t bytes, AllocTag tag) : meter_(t_meter), bytes_(bytes), tag_(tag) {
  if (meter_) meter_->on_alloc(tag_, bytes_);
}

TrackedBytes::~TrackedBytes() { release(); }

TrackedBytes::TrackedBytes(TrackedBytes&& other) noexcept
    : meter_(std::move(other.meter_)), bytes_(other.bytes_), tag_(other.tag_) {
  other.bytes_ = 0;
}

TrackedBytes& TrackedBytes::operator=(TrackedBytes&& other) noexcept {
  if (this != &other) {
    release();
    meter_ = std::move(other.meter_);
    bytes_ = other.bytes_;
    tag_ = other.tag_;
    other.bytes_ = 0;
  }
  return *this;
}

void TrackedBytes::release() {
  if (meter_) {
    meter_->on_free(tag_, bytes_);
    meter_.reset();
  }
  bytes_ = 0;
}

}  // namespace minitune
