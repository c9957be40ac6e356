// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-accurate accounting of tensor payload allocations.
//
// A MemoryMeter is attached to the current thread with a MemoryScope. Every
// tracked buffer created while a meter is active registers its payload size
// with that meter and deregisters on destruction, even when it is destroyed
// on another thread or after the scope has ended. Buffers created with no
// active meter are not counted.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace minitune {

/// What a tracked allocation holds. Peaks are kept per tag.
enum class AllocTag : std::uint8_t {
  kActivation = 0,
  kParameter,
  kGradient,
  kLogits,
  kOptimizerState,
};

inline constexpr std::size_t kNumAllocTags = 5;

std::string_view to_string(AllocTag tag);

struct MemorySnapshot {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
  std::array<std::int64_t, kNumAllocTags> live_by_tag{};
  std::array<std::int64_t, kNumAllocTags> peak_by_tag{};
  /// Peak of total live bytes observed while each phase label was active.
  std::map<std::string, std::int64_t> phase_peaks;
  std::int64_t num_allocations = 0;
  std::int64_t num_frees = 0;

  std::int64_t live(AllocTag tag) const { return live_by_tag[static_cast<std::size_t>(tag)]; }
  std::int64_t peak(AllocTag tag) const { return peak_by_tag[static_cast<std::size_t>(tag)]; }
  std::int64_t phase_peak(const std::string& phase) const {
    auto it = phase_peaks.find(phase);
    return it == phase_peaks.end() ? 0 : it->second;
  }
};

class MemoryMeter {
 public:
  void on_alloc(AllocTag tag, std::int64_t bytes);
  void on_free(AllocTag tag, std::int64_t bytes);

  /// Enters a phase; returns the label that was active before.
  std::string enter_phase(const std::string& phase);
  void restore_phase(const std::string& previous);

  MemorySnapshot snapshot() const;

  /// Resets running peaks (total, per tag, per phase) to the current live values.
  void reset_peaks();

 private:
  mutable std::mutex mu_;
  std::int64_t live_ = 0;
  std::int64_t peak_ = 0;
  std::array<std::int64_t, kNumAllocTags> live_by_tag_{};
  std::array<std::int64_t, kNumAllocTags> peak_by_tag_{};
  std::map<std::string, std::int64_t> phase_peaks_;
  std::string phase_;
  std::int64_t allocs_ = 0;
  std::int64_t frees_ = 0;
};

/// The meter active on this thread, or null.
std::shared_ptr<MemoryMeter> active_meter();

/// Snapshot of the active meter; all zeros when none is active.
MemorySnapshot memory_report();

class MemoryScope {
 public:
  explicit MemoryScope(std::shared_ptr<MemoryMeter> meter);
  ~MemoryScope();
  MemoryScope(const MemoryScope&) = delete;
  MemoryScope& operator=(const MemoryScope&) = delete;

 private:
  std::shared_ptr<MemoryMeter> previous_;
};

/// Labels allocations peaks with a phase (forward, loss, backward, optimizer).
class PhaseScope {
 public:
  explicit PhaseScope(const std::string& phase);
  ~PhaseScope();
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  std::shared_ptr<MemoryMeter> meter_;
  std::string previous_;
};

/// Move-only registration of a payload with the meter active at construction.
class TrackedBytes {
 public:
  TrackedBytes() = default;
  TrackedBytes(std::int64_t bytes, AllocTag tag);
  ~TrackedBytes();
  TrackedBytes(TrackedBytes&& other) noexcept;
  TrackedBytes& operator=(TrackedBytes&& other) noexcept;
  TrackedBytes(const TrackedBytes&) = delete;
  TrackedBytes& operator=(const TrackedBytes&) = delete;

  std::int64_t bytes() const { return bytes_; }
  AllocTag tag() const { return tag_; }

 private:
  void release();

  std::shared_ptr<MemoryMeter> meter_;
  std::int64_t bytes_ = 0;
  AllocTag tag_ = AllocTag::kActivation;
};

}  // namespace minitune
