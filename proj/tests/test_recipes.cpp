// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "minitune/checkpoint.hpp"
#include "minitune/config.hpp"
#include "minitune/recipes.hpp"

namespace mt = minitune;
namespace cfg = minitune::config;
namespace rc = minitune::recipes;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("minitune_recipe_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

// Shipped toy config with a short run and no files unless asked for.
cfg::ConfigNode toy(const std::string& name, std::vector<std::string> overrides = {}) {
  auto root = cfg::load_config_file(std::string(MINITUNE_SOURCE_DIR) + "/configs/" + name);
  std::vector<std::string> all = {"seed=3", "max_steps_per_epoch=4", "checkpointer=null", "metric_logger=null",
                                  "output_dir=null"};
  all.insert(all.end(), overrides.begin(), overrides.end());
  return cfg::apply_overrides(root, all);
}

rc::RunReport run(const cfg::ConfigNode& root, const std::string& recipe = "sft_full",
                  std::function<void(const rc::StepRecord&, const mt::nn::TransformerDecoder&)> on_step = {}) {
  rc::RunOptions o;
  o.recipe = recipe;
  o.write_files = false;
  o.on_step = std::move(on_step);
  return rc::run_sft(root, o);
}

std::vector<std::vector<float>> snapshot(const mt::nn::TransformerDecoder& m) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, p] : m.named_parameters()) out.push_back(p.value().to_vector());
  return out;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(SftRecipe, FixedSeedRerunsAreBitwiseIdentical) {
  auto a = run(toy("sft_full_toy.yaml"));
  auto b = run(toy("sft_full_toy.yaml"));
  ASSERT_EQ(a.steps.size(), 4u);
  EXPECT_TRUE(same_bits(a.losses(), b.losses()));
  EXPECT_EQ(snapshot(*a.model), snapshot(*b.model));
  for (float l : a.losses()) EXPECT_TRUE(std::isfinite(l));
}

TEST(SftRecipe, StepsAreContiguousAndThroughputIsConsistent) {
  auto r = run(toy("sft_full_toy.yaml"));
  double wall_ms = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    EXPECT_EQ(r.steps[i].step, static_cast<std::int64_t>(i) + 1);
    EXPECT_GT(r.steps[i].tokens, 0);
    EXPECT_GT(r.steps[i].label_tokens, 0);
    EXPECT_LT(r.steps[i].label_tokens, r.steps[i].tokens);
    EXPECT_GT(r.steps[i].forward_peak, 0);
    EXPECT_GT(r.steps[i].backward_peak, 0);
    wall_ms += r.steps[i].wall_ms;
    tokens += r.steps[i].tokens;
  }
  EXPECT_EQ(r.total_tokens, tokens);
  EXPECT_NEAR(r.tokens_per_second, static_cast<double>(tokens) / (wall_ms / 1000.0), 1e-6 * r.tokens_per_second);
}

TEST(SftRecipe, LossFallsOverEpochs) {
  auto r = run(toy("sft_full_toy.yaml", {"epochs=4", "dataset.num_samples=16", "dataset.split=train", "optimizer.lr=3e-3"}));
  ASSERT_EQ(r.steps.size(), 16u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 4; ++i) {
    first += r.steps[static_cast<std::size_t>(i)].loss;
    last += r.steps[r.steps.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, first);
}

TEST(SftRecipe, FusedOptimizerMatchesStandardBitwise) {
  for (const char* opt : {"torch.optim.AdamW", "minitune.optim.AdamW8bit"}) {
    std::vector<std::vector<std::vector<float>>> standard, fused;
    auto a = run(toy("sft_full_toy.yaml", {std::string("optimizer._component_=") + opt, "optimizer.fused=null"}),
                 "sft_full", [&](const rc::StepRecord&, const mt::nn::TransformerDecoder& m) { standard.push_back(snapshot(m)); });
    auto b = run(toy("sft_full_toy.yaml", {std::string("optimizer._component_=") + opt, "optimizer.fused=null",
                                           "optimizer_in_bwd=True"}),
                 "sft_full", [&](const rc::StepRecord&, const mt::nn::TransformerDecoder& m) { fused.push_back(snapshot(m)); });
    EXPECT_TRUE(same_bits(a.losses(), b.losses())) << opt;
    EXPECT_EQ(standard, fused) << opt;
    for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_LT(b.steps[i].gradient_peak, a.steps[i].gradient_peak);
  }
}

TEST(SftRecipe, ActivationCheckpointingKeepsLossesAndCutsForwardPeak) {
  auto off = run(toy("sft_full_toy.yaml"));
  auto on = run(toy("sft_full_toy.yaml", {"enable_activation_checkpointing=True"}));
  EXPECT_TRUE(same_bits(off.losses(), on.losses()));
  EXPECT_EQ(snapshot(*off.model), snapshot(*on.model));
  for (std::size_t i = 0; i < off.steps.size(); ++i) {
    EXPECT_LT(on.steps[i].forward_activation_peak, off.steps[i].forward_activation_peak);
  }
}

TEST(SftRecipe, LinearCrossEntropyTracksCrossEntropy) {
  auto ce = run(toy("sft_full_toy.yaml"));
  auto lce = run(toy("sft_full_toy.yaml", {"loss._component_=minitune.loss.LinearCrossEntropyLoss", "loss.chunk_size=32"}));
  ASSERT_EQ(ce.steps.size(), lce.steps.size());
  for (std::size_t i = 0; i < ce.steps.size(); ++i) {
    EXPECT_NEAR(ce.steps[i].loss, lce.steps[i].loss, 1e-4f * std::abs(ce.steps[i].loss)) << "step " << i + 1;
    EXPECT_LT(lce.steps[i].loss_peak, ce.steps[i].loss_peak);
  }
}

TEST(SftRecipe, AllFlagCombinationsTrainOrFailFast) {
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<std::string> o = {"max_steps_per_epoch=2"};
    if (mask & 1) o.push_back("enable_activation_checkpointing=True");
    if (mask & 2) o.push_back("loss._component_=minitune.loss.LinearCrossEntropyLoss");
    if (mask & 4) o.push_back("optimizer_in_bwd=True");
    if (mask & 8) o.push_back("optimizer._component_=minitune.optim.AdamW8bit");
    if (mask & 8) o.push_back("optimizer.fused=null");
    for (int k : {1, 2}) {
      auto overrides = o;
      overrides.push_back("gradient_accumulation_steps=" + std::to_string(k));
      const auto root = toy("sft_full_toy.yaml", overrides);
      int steps_seen = 0;
      auto go = [&] { return run(root, "sft_full", [&](const rc::StepRecord&, const mt::nn::TransformerDecoder&) { ++steps_seen; }); };
      if ((mask & 4) && k > 1) {
        EXPECT_THROW(go(), cfg::ConfigError) << "mask " << mask;
        EXPECT_EQ(steps_seen, 0);
        continue;
      }
      auto r = go();
      ASSERT_EQ(r.steps.size(), 2u) << "mask " << mask << " k " << k;
      for (float l : r.losses()) EXPECT_TRUE(std::isfinite(l)) << "mask " << mask << " k " << k;
    }
  }
}

TEST(SftRecipe, DeclaredIncompatibilitiesFailBeforeTraining) {
  const std::vector<std::pair<std::vector<std::string>, std::string>> cases = {
      {{"optimizer_in_bwd=True", "gradient_accumulation_steps=4"}, "gradient_accumulation_steps"},
      {{"optimizer_in_bwd=True", "clip_grad_norm=1.0"}, "clip_grad_norm"},
      {{"enable_activation_offloading=True"}, "offloading"},
      {{"dtype=bf16"}, "bf16"},
      {{"device=cuda"}, "cuda"},
      {{"batch_size=0"}, "batch_size"},
      {{"run_val_every_n_steps=2", "dataset_val=null"}, "dataset_val"},
      {{"tokenizer.max_seq_len=1024"}, "max_seq_len"},
  };
  for (const auto& [overrides, needle] : cases) {
    int steps_seen = 0;
    const auto msg = error_of([&] {
      run(toy("sft_full_toy.yaml", overrides), "sft_full",
          [&](const rc::StepRecord&, const mt::nn::TransformerDecoder&) { ++steps_seen; });
    });
    EXPECT_NE(msg.find(needle), std::string::npos) << msg;
    EXPECT_EQ(steps_seen, 0) << needle;
  }
  EXPECT_NE(error_of([&] { run(toy("sft_full_toy.yaml"), "sft_lora"); }).find("LoRA"), std::string::npos);
}

TEST(SftRecipe, CompileIsIgnoredWithAWarning) {
  auto plain = run(toy("sft_full_toy.yaml"));
  auto compiled = run(toy("sft_full_toy.yaml", {"compile=True"}));
  EXPECT_TRUE(same_bits(plain.losses(), compiled.losses()));
  ASSERT_EQ(compiled.warnings.size(), 1u);
  EXPECT_NE(compiled.warnings[0].find("compile"), std::string::npos);
}

TEST(SftRecipe, GradientClippingAndAccumulationRun) {
  auto clipped = run(toy("sft_full_toy.yaml", {"clip_grad_norm=0.01"}));
  auto plain = run(toy("sft_full_toy.yaml"));
  EXPECT_EQ(clipped.losses().front(), plain.losses().front());
  EXPECT_NE(snapshot(*clipped.model), snapshot(*plain.model));
  auto accum = run(toy("sft_full_toy.yaml", {"gradient_accumulation_steps=2", "batch_size=1"}));
  ASSERT_EQ(accum.steps.size(), 4u);
  EXPECT_NEAR(accum.steps[0].tokens, plain.steps[0].tokens, 0);
}

TEST(SftRecipe, PackingCutsPaddingAndKeepsLabels) {
  auto padded = run(toy("sft_full_toy.yaml", {"tokenizer.max_seq_len=256"}));
  auto packed = run(toy("sft_full_toy.yaml", {"tokenizer.max_seq_len=256", "dataset.packed=True", "batch_size=1"}));
  EXPECT_LT(packed.pad_fraction(), padded.pad_fraction());
  for (float l : packed.losses()) EXPECT_TRUE(std::isfinite(l));
}

TEST(SftRecipe, ValidationRunsOnAFrozenCopy) {
  auto plain = run(toy("sft_full_toy.yaml"));
  auto val = run(toy("sft_full_toy.yaml", {"run_val_every_n_steps=2"}));
  EXPECT_TRUE(same_bits(plain.losses(), val.losses()));
  EXPECT_EQ(snapshot(*plain.model), snapshot(*val.model));
  for (const auto& s : val.steps) {
    EXPECT_EQ(s.val_loss.has_value(), s.step % 2 == 0);
    if (s.val_loss) {
      EXPECT_TRUE(std::isfinite(*s.val_loss));
    }
  }
}

TEST(SftRecipe, SeedEnvironmentOverridesConfig) {
  auto base = run(toy("sft_full_toy.yaml", {"seed=9"}));
  ::setenv("MINITUNE_SEED", "9", 1);
  auto via_env = run(toy("sft_full_toy.yaml", {"seed=3"}));
  ::setenv("MINITUNE_SEED", "nine", 1);
  EXPECT_THROW(run(toy("sft_full_toy.yaml")), cfg::ConfigError);
  ::unsetenv("MINITUNE_SEED");
  EXPECT_TRUE(same_bits(base.losses(), via_env.losses()));
  auto other = run(toy("sft_full_toy.yaml", {"seed=4"}));
  EXPECT_FALSE(same_bits(base.losses(), other.losses()));
}

TEST(SftRecipe, ResumedRunSplicesIntoUninterruptedTrajectory) {
  for (const std::string recipe : {"sft_full", "sft_lora"}) {
    const std::string file = recipe + "_toy.yaml";
    const auto dir = fresh_dir("splice_" + recipe);
    const std::vector<std::string> common = {"max_steps_per_epoch=5", "epochs=2", "checkpointer._component_=minitune.training.Checkpointer",
                                             "checkpointer.output_dir=" + (dir / "ckpt").string(), "checkpointer.save_every_n_steps=5"};
    auto with = [&](std::vector<std::string> extra) {
      auto o = common;
      o.insert(o.end(), extra.begin(), extra.end());
      return toy(file, o);
    };
    auto whole = run(with({}), recipe);
    ASSERT_EQ(whole.steps.size(), 10u);
    ASSERT_EQ(whole.checkpoints.size(), 2u);

    auto first = run(with({"epochs=1"}), recipe);
    const auto step5 = (dir / "ckpt" / "step_5").string();
    auto resumed = run(with({"resume_from_checkpoint=True", "checkpointer.checkpoint_dir=" + step5}), recipe);
    ASSERT_EQ(resumed.resumed_from_step, 5);
    ASSERT_EQ(resumed.steps.size(), 5u);
    EXPECT_EQ(resumed.steps.front().step, 6);
    auto spliced = first.losses();
    for (float l : resumed.losses()) spliced.push_back(l);
    EXPECT_TRUE(same_bits(whole.losses(), spliced)) << recipe;
    EXPECT_EQ(snapshot(*whole.model), snapshot(*resumed.model)) << recipe;

    const auto ck = mt::checkpoint::read_checkpoint(step5);
    EXPECT_EQ(ck.mode, recipe == "sft_lora" ? mt::checkpoint::Mode::kAdapter : mt::checkpoint::Mode::kFull);
    EXPECT_TRUE(ck.optimizer.has_value());

    const auto msg = error_of([&] {
      run(with({"seed=4", "resume_from_checkpoint=True", "checkpointer.checkpoint_dir=" + step5}), recipe);
    });
    EXPECT_NE(msg.find("seed"), std::string::npos) << msg;
  }
}

TEST(SftRecipe, WritesReportFiles) {
  const auto dir = fresh_dir("files");
  auto root = cfg::apply_overrides(cfg::load_config_file(std::string(MINITUNE_SOURCE_DIR) + "/configs/sft_full_toy.yaml"),
                                   {"output_dir=" + dir.string(), "max_steps_per_epoch=3", "seed=1"});
  rc::RunOptions o;
  std::ostringstream log;
  o.log = &log;
  auto r = rc::run_sft(root, o);
  std::ifstream csv(dir / "logs" / "metrics.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 4);
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "step_3" / mt::checkpoint::kManifestName));
  auto written = cfg::load_config_file(dir / "config.yaml");
  EXPECT_EQ(written.at("seed").as_int(), 1);
  EXPECT_EQ(written.at("model").at("seed").as_int(), 1);
  EXPECT_EQ(written.at("metric_logger").at("log_dir").as_string(), (dir / "logs").string());
  EXPECT_NE(log.str().find("step 3"), std::string::npos);
  EXPECT_EQ(r.checkpoints.size(), 1u);
}
