// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace minitune::data {

namespace {

std::string field(const nlohmann::json& obj, const char* key, bool required, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (required) throw std::runtime_error(where + ": missing key \"" + key + "\"");
    return {};
  }
  if (!it->is_string()) throw std::runtime_error(where + ": key \"" + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace

std::vector<InstructSample> parse_jsonl(std::istream& in, const std::string& source) {
  std::vector<InstructSample> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw std::runtime_error(where + ": expected a JSON object");
    InstructSample s{field(obj, "instruction", true, where), field(obj, "input", false, where),
                     field(obj, "output", true, where)};
    if (s.instruction.empty()) throw std::runtime_error(where + ": \"instruction\" is empty");
    if (s.output.empty()) throw std::runtime_error(where + ": \"output\" is empty");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<InstructSample> load_jsonl_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  return parse_jsonl(in, path.string());
}

void write_jsonl(const std::vector<InstructSample>& samples, std::ostream& out) {
  for (const auto& s : samples) {
    out << nlohmann::json{{"instruction", s.instruction}, {"input", s.input}, {"output", s.output}}.dump() << '\n';
  }
}

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (id != kBosId && id != kEosId && id != kPadId) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside the byte vocabulary");
    }
  }
  return out;
}

std::int64_t TokenSequence::num_labels() const {
  return std::count(label_mask.begin(), label_mask.end(), std::uint8_t{1});
}

std::string format_prompt(const InstructSample& s) {
  std::string p = "Instruction: " + s.instruction + "\n";
  if (!s.input.empty()) p += "Input: " + s.input + "\n";
  return p + "Response: ";
}

TokenSequence apply_instruct_template(const InstructSample& sample) {
  TokenSequence seq;
  seq.tokens.push_back(kBosId);
  for (auto t : tokenize(format_prompt(sample))) seq.tokens.push_back(t);
  seq.label_mask.assign(seq.tokens.size(), 0);
  for (auto t : tokenize(sample.output)) seq.tokens.push_back(t);
  seq.tokens.push_back(kEosId);
  seq.label_mask.resize(seq.tokens.size(), 1);
  return seq;
}

TokenSequence truncate_prompt(const TokenSequence& seq, std::int64_t max_len) {
  const auto len = static_cast<std::int64_t>(seq.size());
  if (len <= max_len) return seq;
  const auto first_label = std::find(seq.label_mask.begin(), seq.label_mask.end(), 1) - seq.label_mask.begin();
  const std::int64_t completion = len - first_label;
  if (completion + 1 > max_len) {
    throw std::invalid_argument("completion of " + std::to_string(completion) + " tokens does not fit in length " +
                                std::to_string(max_len));
  }
  const std::int64_t drop = len - max_len;
  TokenSequence out;
  out.tokens.push_back(seq.tokens[0]);
  out.label_mask.push_back(seq.label_mask[0]);
  out.tokens.insert(out.tokens.end(), seq.tokens.begin() + 1 + drop, seq.tokens.end());
  out.label_mask.insert(out.label_mask.end(), seq.label_mask.begin() + 1 + drop, seq.label_mask.end());
  return out;
}

namespace {

void append_doc(PackedSequence& p, const TokenSequence& seq) {
  const auto doc = static_cast<std::int32_t>(p.num_docs++);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    p.tokens.push_back(seq.tokens[i]);
    p.label_mask.push_back(seq.label_mask[i]);
    p.position_ids.push_back(static_cast<std::int32_t>(i));
    p.doc_ids.push_back(doc);
  }
}

void pad_to(PackedSequence& p, std::int64_t len) {
  const std::int64_t pad = len - static_cast<std::int64_t>(p.size());
  if (pad <= 0) return;
  const auto doc = static_cast<std::int32_t>(p.num_docs);
  for (std::int64_t i = 0; i < pad; ++i) {
    p.tokens.push_back(kPadId);
    p.label_mask.push_back(0);
    p.position_ids.push_back(static_cast<std::int32_t>(i));
    p.doc_ids.push_back(doc);
  }
  p.pad_count = pad;
}

void check_len(std::int64_t len, const char* what) {
  if (len <= 0) throw std::invalid_argument(std::string(what) + " must be positive, got " + std::to_string(len));
}

}  // namespace

std::vector<PackedSequence> pack_sequences(const std::vector<TokenSequence>& seqs, std::int64_t pack_len) {
  check_len(pack_len, "pack_len");
  std::vector<PackedSequence> packs;
  for (const auto& raw : seqs) {
    if (raw.size() == 0) continue;
    TokenSequence seq = truncate_prompt(raw, pack_len);
    const auto need = static_cast<std::int64_t>(seq.size());
    auto it = std::find_if(packs.begin(), packs.end(),
                           [&](const PackedSequence& p) { return static_cast<std::int64_t>(p.size()) + need <= pack_len; });
    if (it == packs.end()) {
      packs.emplace_back();
      it = packs.end() - 1;
    }
    append_doc(*it, seq);
  }
  for (auto& p : packs) pad_to(p, pack_len);
  return packs;
}

std::vector<PackedSequence> pad_sequences(const std::vector<TokenSequence>& seqs, std::int64_t pad_len) {
  check_len(pad_len, "pad_len");
  std::vector<PackedSequence> rows;
  for (const auto& raw : seqs) {
    if (raw.size() == 0) continue;
    rows.emplace_back();
    append_doc(rows.back(), truncate_prompt(raw, pad_len));
    pad_to(rows.back(), pad_len);
  }
  return rows;
}

nn::DecoderInput Batch::decoder_input() const { return {batch, seq, tokens, positions, doc_ids}; }

Batch collate_batch(std::span<const PackedSequence> rows, std::int32_t ignore_index) {
  if (rows.empty()) throw std::invalid_argument("collate_batch: empty batch");
  Batch b;
  b.batch = static_cast<std::int64_t>(rows.size());
  b.seq = static_cast<std::int64_t>(rows[0].size());
  for (const auto& r : rows) {
    if (static_cast<std::int64_t>(r.size()) != b.seq) {
      throw std::invalid_argument("collate_batch: row lengths differ (" + std::to_string(b.seq) + " vs " +
                                  std::to_string(r.size()) + ")");
    }
    for (std::int64_t i = 0; i < b.seq; ++i) {
      const bool next_is_label = i + 1 < b.seq && r.label_mask[i + 1] && r.doc_ids[i + 1] == r.doc_ids[i];
      b.labels.push_back(next_is_label ? r.tokens[i + 1] : ignore_index);
      b.num_label_tokens += next_is_label ? 1 : 0;
    }
    b.tokens.insert(b.tokens.end(), r.tokens.begin(), r.tokens.end());
    b.positions.insert(b.positions.end(), r.position_ids.begin(), r.position_ids.end());
    b.doc_ids.insert(b.doc_ids.end(), r.doc_ids.begin(), r.doc_ids.end());
    b.num_pad_tokens += r.pad_count;
  }
  return b;
}

namespace {

const std::vector<std::string>& word_list() {
  static const std::vector<std::string> words = {
      "apple", "river", "stone", "cloud", "green", "quick", "lamp",  "forest", "tiger", "paper", "music",
      "ocean", "silver", "bread", "train", "window", "garden", "yellow", "candle", "mirror", "planet", "honey",
      "bridge", "winter", "pencil", "rocket", "violet", "castle", "meadow", "spark", "anchor", "copper"};
  return words;
}

std::string join(const std::vector<std::string>& ws) {
  std::string out;
  for (std::size_t i = 0; i < ws.size(); ++i) out += (i ? " " : "") + ws[i];
  return out;
}

InstructSample make_task(int task, const std::vector<std::string>& ws) {
  switch (task) {
    case 0:
      return {"Repeat the words.", join(ws), join(ws)};
    case 1: {
      auto r = ws;
      std::reverse(r.begin(), r.end());
      return {"Reverse the order of the words.", join(ws), join(r)};
    }
    case 2: {
      std::string up = join(ws);
      for (auto& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      return {"Write the words in capitals.", join(ws), up};
    }
    case 3: {
      auto s = ws;
      std::sort(s.begin(), s.end());
      return {"Sort these words: " + join(ws), "", join(s)};
    }
    default:
      return {"Count the words: " + join(ws), "", std::to_string(ws.size())};
  }
}

}  // namespace

std::vector<InstructSample> generate_corpus(std::int64_t num_samples, std::uint64_t seed) {
  if (num_samples < 0) throw std::invalid_argument("num_samples must be >= 0");
  constexpr std::int64_t kMinLen = 30, kMaxLen = 200;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> target_dist(kMinLen, kMaxLen);
  std::uniform_int_distribution<int> task_dist(0, 4);
  std::uniform_int_distribution<std::size_t> word_dist(0, word_list().size() - 1);
  std::vector<InstructSample> out;
  while (static_cast<std::int64_t>(out.size()) < num_samples) {
    const std::int64_t target = target_dist(rng);
    const int task = task_dist(rng);
    std::vector<std::string> ws{word_list()[word_dist(rng)]};
    InstructSample s = make_task(task, ws);
    for (;;) {
      auto more = ws;
      more.push_back(word_list()[word_dist(rng)]);
      InstructSample next = make_task(task, more);
      if (static_cast<std::int64_t>(apply_instruct_template(next).size()) > target) break;
      ws = std::move(more);
      s = std::move(next);
    }
    const auto len = static_cast<std::int64_t>(apply_instruct_template(s).size());
    if (len >= kMinLen && len <= kMaxLen) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace minitune::data
