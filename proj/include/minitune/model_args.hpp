// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace minitune::models {

struct DecoderArgs {
  std::int64_t vocab_size = 0;
  std::int64_t num_layers = 0;
  std::int64_t num_heads = 0;
  std::int64_t num_kv_heads = 0;
  std::int64_t embed_dim = 0;
  std::int64_t max_seq_len = 0;
  /// 0 selects default_intermediate_dim(embed_dim).
  std::int64_t intermediate_dim = 0;
  double rope_base = 500000.0;
  float norm_eps = 1e-5f;
  float attn_dropout = 0.0f;
  bool tie_word_embeddings = false;
  std::uint64_t seed = 0;
};

struct LoraArgs {
  std::int64_t rank = 8;
  float alpha = 16.0f;
  /// Subset of {q, k, v, output}; the "_proj" suffixed names are accepted too.
  std::vector<std::string> targets = {"q", "v"};
};

}  // namespace minitune::models
