// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Instruct datasets: JSONL loading, a byte-level tokenizer, prompt
// templating, first-fit packing with document ids, and batch collation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minitune/nn.hpp"

namespace minitune::data {

inline constexpr std::int32_t kBosId = 256;
inline constexpr std::int32_t kEosId = 257;
inline constexpr std::int32_t kPadId = 258;
inline constexpr std::int64_t kByteVocabSize = 259;

struct InstructSample {
  std::string instruction;
  std::string input;
  std::string output;
  bool operator==(const InstructSample&) const = default;
};

/// One JSON object per line with string fields instruction, output and an
/// optional input. Blank lines are skipped. Errors cite `source:line`.
std::vector<InstructSample> parse_jsonl(std::istream& in, const std::string& source = "<stream>");
std::vector<InstructSample> load_jsonl_dataset(const std::filesystem::path& path);
void write_jsonl(const std::vector<InstructSample>& samples, std::ostream& out);

/// Bytes map to ids 0..255; 256/257/258 are bos/eos/pad.
std::vector<std::int32_t> tokenize(std::string_view text);
/// Inverse of tokenize. Special ids are dropped; other ids outside 0..258 throw.
std::string detokenize(std::span<const std::int32_t> ids);

struct TokenSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> label_mask;  // 1 on completion tokens (output + eos)
  std::size_t size() const { return tokens.size(); }
  std::int64_t num_labels() const;
};

std::string format_prompt(const InstructSample& sample);
/// bos + prompt + output + eos, with the label mask on output + eos.
TokenSequence apply_instruct_template(const InstructSample& sample);

/// Drops prompt tokens right after bos until the sequence fits. Throws when
/// bos plus the completion alone exceed max_len.
TokenSequence truncate_prompt(const TokenSequence& seq, std::int64_t max_len);

struct PackedSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> position_ids;  // restart at 0 for every document
  std::vector<std::int32_t> doc_ids;       // 0..num_docs-1, padding tail is its own id
  std::vector<std::uint8_t> label_mask;
  std::int64_t pad_count = 0;
  std::int64_t num_docs = 0;
  std::size_t size() const { return tokens.size(); }
};

/// Greedy first-fit in input order: each sequence goes into the first open
/// pack with room, else a new pack. Over-length sequences are truncated with
/// truncate_prompt first.
std::vector<PackedSequence> pack_sequences(const std::vector<TokenSequence>& seqs, std::int64_t pack_len);

/// Per-sample padding: one row per sequence, padded to pad_len.
std::vector<PackedSequence> pad_sequences(const std::vector<TokenSequence>& seqs, std::int64_t pad_len);

struct Batch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> labels;  // next token, or ignore_index
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> doc_ids;
  std::int64_t num_pad_tokens = 0;
  std::int64_t num_label_tokens = 0;

  nn::DecoderInput decoder_input() const;
};

/// Rows must share one length. labels[i] = tokens[i+1] when token i+1 is a
/// completion token of the same document, else ignore_index.
Batch collate_batch(std::span<const PackedSequence> rows, std::int32_t ignore_index = -100);

/// Seeded Alpaca-like corpus of word tasks; templated lengths lie in [30, 200].
std::vector<InstructSample> generate_corpus(std::int64_t num_samples, std::uint64_t seed);

}  // namespace minitune::data
