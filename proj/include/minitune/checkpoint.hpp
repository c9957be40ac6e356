// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: <dir>/model.bin holds raw little-endian tensors,
// <dir>/manifest.json indexes them by name with dtype, shape and byte range.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "minitune/nn.hpp"
#include "minitune/optim.hpp"

namespace minitune::checkpoint {

enum class Mode { kFull, kAdapter };
std::string to_string(Mode mode);

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kBlobName = "model.bin";
inline constexpr const char* kManifestName = "manifest.json";

struct TrainingState {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  std::string recipe;
};

struct TensorEntry {
  std::string name;
  std::string dtype;  // "f32" or "u8"
  std::vector<std::int64_t> shape;
  std::int64_t offset = 0;
  std::int64_t nbytes = 0;
};

struct Checkpoint {
  Mode mode = Mode::kFull;
  TrainingState state;
  /// Parameter payloads by name, in manifest order.
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::optional<optim::OptimizerStateDict> optimizer;
};

/// Adapter mode keeps only LoRA parameters. Writes the blob and manifest,
/// replacing any previous save in `dir`.
void save_checkpoint(const std::filesystem::path& dir, const nn::TransformerDecoder& model, Mode mode,
                     const TrainingState& state, const optim::OptimizerStateDict* optimizer = nullptr);

/// Reads and validates a save: offsets must be in range and disjoint, and the
/// blob size must match the manifest.
Checkpoint read_checkpoint(const std::filesystem::path& dir);

/// Copies checkpoint tensors into the model. Full mode requires every model
/// parameter; adapter mode requires every LoRA parameter. Shapes must match.
void load_into(const Checkpoint& ckpt, nn::TransformerDecoder& model);

/// Bytes on disk for a save.
std::int64_t checkpoint_bytes(const std::filesystem::path& dir);

bool is_adapter_name(const std::string& name);

}  // namespace minitune::checkpoint
