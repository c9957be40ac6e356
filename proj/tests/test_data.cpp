// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <sstream>

#include "minitune/data.hpp"
#include "minitune/models.hpp"

namespace mt = minitune;
namespace data = minitune::data;

namespace {

data::TokenSequence seq_of_length(std::int64_t len, std::int32_t fill) {
  data::TokenSequence s;
  for (std::int64_t i = 0; i < len; ++i) {
    s.tokens.push_back(i == 0 ? data::kBosId : fill);
    s.label_mask.push_back(i >= len / 2 ? 1 : 0);
  }
  return s;
}

// Independent first-fit over lengths: returns, per sequence, the pack index.
std::vector<int> first_fit_oracle(const std::vector<std::int64_t>& lens, std::int64_t cap) {
  std::vector<std::int64_t> used;
  std::vector<int> where;
  for (auto l : lens) {
    int chosen = -1;
    for (std::size_t p = 0; p < used.size() && chosen < 0; ++p) {
      if (used[p] + l <= cap) chosen = static_cast<int>(p);
    }
    if (chosen < 0) {
      chosen = static_cast<int>(used.size());
      used.push_back(0);
    }
    used[chosen] += l;
    where.push_back(chosen);
  }
  return where;
}

std::string random_utf8(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(0, 20);
  std::uniform_int_distribution<std::uint32_t> cp(1, 0x10FFFF);
  std::string s;
  for (int i = len(rng); i > 0; --i) {
    std::uint32_t c = cp(rng);
    if (c >= 0xD800 && c <= 0xDFFF) c = 0x41;
    if (c < 0x80) {
      s.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
      s.push_back(static_cast<char>(0xC0 | (c >> 6)));
      s.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      s.push_back(static_cast<char>(0xE0 | (c >> 12)));
      s.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
      s.push_back(static_cast<char>(0xF0 | (c >> 18)));
      s.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return s;
}

}  // namespace

TEST(Jsonl, EmptyStreamGivesNoSamples) {
  std::istringstream in("");
  EXPECT_TRUE(data::parse_jsonl(in).empty());
}

TEST(Jsonl, ValidLinesKeepOrder) {
  std::istringstream in(
      "{\"instruction\":\"a\",\"input\":\"\",\"output\":\"x\"}\n"
      "{\"instruction\":\"b\",\"input\":\"i\",\"output\":\"y\"}\n"
      "{\"instruction\":\"c\",\"output\":\"z\"}\n");
  auto s = data::parse_jsonl(in);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].instruction, "a");
  EXPECT_EQ(s[1].input, "i");
  EXPECT_EQ(s[2].output, "z");
  EXPECT_EQ(s[2].input, "");
}

TEST(Jsonl, ErrorsCiteLineNumber) {
  auto message = [](const std::string& text) {
    std::istringstream in(text);
    try {
      data::parse_jsonl(in, "train.jsonl");
    } catch (const std::runtime_error& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string ok = "{\"instruction\":\"a\",\"output\":\"x\"}\n";
  auto missing = message(ok + "{\"instruction\":\"b\",\"input\":\"\"}\n");
  EXPECT_NE(missing.find("train.jsonl:2"), std::string::npos) << missing;
  EXPECT_NE(missing.find("output"), std::string::npos) << missing;
  EXPECT_NE(message(ok + ok + "{not json\n").find("train.jsonl:3"), std::string::npos);
  EXPECT_NE(message("{\"instruction\":5,\"output\":\"x\"}\n").find("train.jsonl:1"), std::string::npos);
  EXPECT_THROW(data::load_jsonl_dataset("/nonexistent/file.jsonl"), std::runtime_error);
}

TEST(Tokenizer, Basics) {
  EXPECT_TRUE(data::tokenize("").empty());
  EXPECT_EQ(data::tokenize("ab"), (std::vector<std::int32_t>{97, 98}));
  EXPECT_THROW(data::detokenize(std::vector<std::int32_t>{259}), std::out_of_range);
}

TEST(Tokenizer, RoundTripsRandomUtf8) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const std::string s = random_utf8(rng);
    EXPECT_EQ(data::detokenize(data::tokenize(s)), s);
  }
}

TEST(Template, EmptyInputOmitsSection) {
  EXPECT_EQ(data::format_prompt({"Say hi.", "", "hi"}).find("Input:"), std::string::npos);
  EXPECT_NE(data::format_prompt({"Say hi.", "to Bob", "hi"}).find("Input: to Bob"), std::string::npos);
}

TEST(Template, MaskCoversOutputAndEos) {
  data::InstructSample s{"Repeat the words.", "green lamp", "green lamp"};
  auto seq = data::apply_instruct_template(s);
  EXPECT_EQ(seq.tokens.front(), data::kBosId);
  EXPECT_EQ(seq.tokens.back(), data::kEosId);
  EXPECT_EQ(seq.num_labels(), static_cast<std::int64_t>(data::tokenize(s.output).size()) + 1);
  const std::size_t start = seq.size() - s.output.size() - 1;
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(seq.label_mask[i], i >= start ? 1 : 0);
  EXPECT_EQ(data::detokenize(std::span(seq.tokens).subspan(start)), s.output);
}

TEST(Truncation, DropsPromptHeadKeepsCompletion) {
  auto seq = data::apply_instruct_template({"A long instruction with many words.", "", "done"});
  auto t = data::truncate_prompt(seq, 12);
  ASSERT_EQ(t.size(), 12u);
  EXPECT_EQ(t.tokens.front(), data::kBosId);
  EXPECT_EQ(t.num_labels(), seq.num_labels());
  EXPECT_TRUE(std::equal(t.tokens.end() - 7, t.tokens.end(), seq.tokens.end() - 7));
  EXPECT_THROW(data::truncate_prompt(seq, 5), std::invalid_argument);
}

TEST(Packing, FullLengthSequenceFillsOnePack) {
  auto packs = data::pack_sequences({seq_of_length(16, 7)}, 16);
  ASSERT_EQ(packs.size(), 1u);
  EXPECT_EQ(packs[0].pad_count, 0);
}

TEST(Packing, FirstFitExample) {
  auto packs = data::pack_sequences({seq_of_length(5, 1), seq_of_length(5, 2), seq_of_length(5, 3)}, 10);
  ASSERT_EQ(packs.size(), 2u);
  EXPECT_EQ(packs[0].num_docs, 2);
  EXPECT_EQ(packs[1].num_docs, 1);
  EXPECT_EQ(packs[0].pad_count, 0);
  EXPECT_EQ(packs[1].pad_count, 5);
  EXPECT_EQ(packs[0].doc_ids, (std::vector<std::int32_t>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(packs[0].position_ids, (std::vector<std::int32_t>{0, 1, 2, 3, 4, 0, 1, 2, 3, 4}));
  EXPECT_EQ(packs[1].doc_ids, (std::vector<std::int32_t>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(packs[1].tokens[7], data::kPadId);
}

TEST(Packing, RejectsZeroLength) { EXPECT_THROW(data::pack_sequences({}, 0), std::invalid_argument); }

TEST(Packing, PropertiesOnRandomCorpora) {
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    const std::int64_t cap = 16 + static_cast<std::int64_t>(rng() % 64);
    const int n = 2 + static_cast<int>(rng() % 30);
    std::vector<data::TokenSequence> seqs;
    std::vector<std::int64_t> lens;
    std::map<std::int32_t, std::int64_t> before;
    for (int i = 0; i < n; ++i) {
      const std::int64_t len = 2 + static_cast<std::int64_t>(rng() % (cap - 1));
      auto s = seq_of_length(len, static_cast<std::int32_t>(rng() % 256));
      for (auto t : s.tokens) ++before[t];
      lens.push_back(len);
      seqs.push_back(std::move(s));
    }
    auto packs = data::pack_sequences(seqs, cap);
    auto where = first_fit_oracle(lens, cap);
    ASSERT_EQ(packs.size(), static_cast<std::size_t>(*std::max_element(where.begin(), where.end()) + 1));

    std::map<std::int32_t, std::int64_t> after;
    std::int64_t pads = 0;
    for (const auto& p : packs) {
      ASSERT_EQ(static_cast<std::int64_t>(p.size()), cap);
      pads += p.pad_count;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.tokens[i] != data::kPadId) ++after[p.tokens[i]];
        if (i > 0 && p.doc_ids[i] == p.doc_ids[i - 1]) {
          EXPECT_EQ(p.position_ids[i], p.position_ids[i - 1] + 1);
        } else {
          EXPECT_EQ(p.position_ids[i], 0);
        }
      }
    }
    EXPECT_EQ(before, after);
    // Documents land where the oracle puts them, in order.
    std::vector<std::int64_t> next_doc(packs.size(), 0);
    for (std::size_t i = 0; i < where.size(); ++i) {
      const auto& p = packs[where[i]];
      auto first = std::find(p.doc_ids.begin(), p.doc_ids.end(), next_doc[where[i]]++);
      EXPECT_EQ(std::count(p.doc_ids.begin(), p.doc_ids.end(), *first), lens[i]);
    }
    std::int64_t per_sample_pads = 0;
    for (const auto& r : data::pad_sequences(seqs, cap)) per_sample_pads += r.pad_count;
    const auto short_count = std::count_if(lens.begin(), lens.end(), [&](std::int64_t l) { return 2 * l < cap; });
    EXPECT_LE(pads, per_sample_pads);
    if (short_count >= 2) {
      EXPECT_LT(pads, per_sample_pads);
    }
  }
}

TEST(Collate, LabelsAreShiftedCompletionTokens) {
  auto a = data::apply_instruct_template({"Repeat the words.", "", "ab"});
  auto b = data::apply_instruct_template({"Count the words: x", "", "1"});
  auto packs = data::pack_sequences({a, b}, 120);
  auto batch = data::collate_batch(packs);
  ASSERT_EQ(batch.batch, 1);
  for (std::int64_t i = 0; i < batch.seq; ++i) {
    const auto& p = packs[0];
    const bool label = i + 1 < batch.seq && p.label_mask[i + 1] == 1 && p.doc_ids[i + 1] == p.doc_ids[i];
    EXPECT_EQ(batch.labels[i], label ? p.tokens[i + 1] : -100) << i;
    if (p.tokens[i] == data::kPadId) {
      EXPECT_EQ(batch.labels[i], -100);
    }
  }
  EXPECT_EQ(batch.num_label_tokens, a.num_labels() + b.num_labels());
  EXPECT_EQ(batch.num_pad_tokens, 120 - static_cast<std::int64_t>(a.size() + b.size()));
}

TEST(Collate, SingleSampleGetsCausalMask) {
  auto s = data::apply_instruct_template({"Say hi.", "", "hi"});
  const auto len = static_cast<std::int64_t>(s.size());
  auto batch = data::collate_batch(data::pad_sequences({s}, len));
  const mt::Tensor mask_t = mt::nn::attention_mask(1, 1, len, batch.doc_ids);
  auto mask = mask_t.data();
  for (std::int64_t i = 0; i < len; ++i) {
    for (std::int64_t j = 0; j < len; ++j) EXPECT_EQ(mask[i * len + j] == 0.0f, j <= i);
  }
}

TEST(Collate, PackedPairGetsBlockDiagonalMask) {
  auto packs = data::pack_sequences({seq_of_length(4, 1), seq_of_length(3, 2)}, 9);
  auto batch = data::collate_batch(packs);
  const mt::Tensor mask_t = mt::nn::attention_mask(1, 1, 9, batch.doc_ids);
  auto mask = mask_t.data();
  for (std::int64_t i = 0; i < 9; ++i) {
    for (std::int64_t j = 0; j < 9; ++j) {
      const bool allowed = j <= i && batch.doc_ids[i] == batch.doc_ids[j];
      EXPECT_EQ(mask[i * 9 + j] == 0.0f, allowed) << i << "," << j;
      if (!allowed) {
        EXPECT_TRUE(std::isinf(mask[i * 9 + j]));
      }
    }
  }
}

TEST(Collate, RejectsRaggedRows) {
  auto a = data::pad_sequences({seq_of_length(4, 1)}, 4);
  auto b = data::pad_sequences({seq_of_length(4, 1)}, 6);
  std::vector<data::PackedSequence> rows{a[0], b[0]};
  EXPECT_THROW(data::collate_batch(rows), std::invalid_argument);
}

TEST(Packing, CrossDocumentIsolationIsBitwise) {
  mt::models::DecoderArgs args;
  args.vocab_size = data::kByteVocabSize;
  args.num_layers = 2;
  args.num_heads = 4;
  args.num_kv_heads = 2;
  args.embed_dim = 32;
  args.max_seq_len = 160;
  args.seed = 5;
  auto model = mt::models::llama3(args);
  auto corpus = data::generate_corpus(6, 11);
  std::vector<data::TokenSequence> seqs;
  for (const auto& s : corpus) seqs.push_back(data::apply_instruct_template(s));
  auto packs = data::pack_sequences(seqs, 160);
  mt::NoGradGuard no_grad;
  for (const auto& pack : packs) {
    std::vector<data::PackedSequence> one{pack};
    auto batch = data::collate_batch(one);
    auto logits = model->forward(batch.decoder_input());
    const auto v = args.vocab_size;
    for (std::int32_t d = 0; d < pack.num_docs; ++d) {
      const auto start = std::find(pack.doc_ids.begin(), pack.doc_ids.end(), d) - pack.doc_ids.begin();
      const auto len = std::count(pack.doc_ids.begin(), pack.doc_ids.end(), d);
      mt::nn::DecoderInput alone{1, len, std::vector<std::int32_t>(pack.tokens.begin() + start, pack.tokens.begin() + start + len),
                                 {}, {}};
      auto ref = model->forward(alone);
      EXPECT_EQ(std::memcmp(ref.data().data(), logits.data().data() + start * v, len * v * sizeof(float)), 0)
          << "doc " << d;
    }
  }
}

TEST(Corpus, SeededAndWithinLengthRange) {
  auto a = data::generate_corpus(500, 42);
  auto b = data::generate_corpus(500, 42);
  auto c = data::generate_corpus(500, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::int64_t lo = 1 << 30, hi = 0;
  bool has_input = false, no_input = false;
  for (const auto& s : a) {
    const auto len = static_cast<std::int64_t>(data::apply_instruct_template(s).size());
    lo = std::min(lo, len);
    hi = std::max(hi, len);
    has_input = has_input || !s.input.empty();
    no_input = no_input || s.input.empty();
  }
  EXPECT_GE(lo, 30);
  EXPECT_LE(hi, 200);
  EXPECT_LT(lo, 60);
  EXPECT_GT(hi, 170);
  EXPECT_TRUE(has_input && no_input);
  std::stringstream io;
  data::write_jsonl(a, io);
  EXPECT_EQ(data::parse_jsonl(io), a);
}
