// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Builder functions. Each builder constructs every submodule itself and hands
// the finished pieces to TransformerDecoder.

#pragma once

#include <cstdint>
#include <memory>
#include <random>

#include "minitune/model_args.hpp"
#include "minitune/nn.hpp"

namespace minitune::models {

/// round(8/3 · embed_dim) rounded up to a multiple of 8.
std::int64_t default_intermediate_dim(std::int64_t embed_dim);

/// Dense Llama-3 style decoder. Weights ~ N(0, 0.02) drawn from `args.seed`;
/// norm scales start at one.
std::shared_ptr<nn::TransformerDecoder> llama3(const DecoderArgs& args);

/// Same base weights as llama3(args) (same draw order), with the targeted
/// attention projections wrapped in LoRALinear. Only adapters are trainable.
std::shared_ptr<nn::TransformerDecoder> lora_llama3(const DecoderArgs& args, const LoraArgs& lora);

/// Dense decoder whose targeted weights are W + scaling · B · A.
std::shared_ptr<nn::TransformerDecoder> merge_lora(const nn::TransformerDecoder& decoder);

/// Independent copy with identical parameter values and trainability.
std::shared_ptr<nn::TransformerDecoder> clone_decoder(const nn::TransformerDecoder& decoder);

/// Copies values by name; every name in `src` must exist in `dst` with the same shape.
void copy_parameters(const nn::TransformerDecoder& src, nn::TransformerDecoder& dst);

}  // namespace minitune::models
