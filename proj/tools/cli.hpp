// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// `tune` command line:
//   tune run <sft_full|sft_lora|async_grpo> --config <path> [key=value ...]
//   tune generate-corpus --num-samples N [--seed S] [--output path]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace minitune::cli {

inline const std::vector<std::string> kRecipes = {"sft_full", "sft_lora", "async_grpo"};

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace minitune::cli
