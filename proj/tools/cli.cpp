// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>

#include "minitune/config.hpp"
#include "minitune/data.hpp"
#include "minitune/grpo.hpp"
#include "minitune/recipes.hpp"

namespace minitune::cli {

namespace {

std::string recipe_list() {
  std::string s;
  for (const auto& r : kRecipes) s += (s.empty() ? "" : ", ") + r;
  return s;
}

int run_recipe(const std::string& recipe, const std::string& config_path, const std::vector<std::string>& overrides,
               std::ostream& out, std::ostream& err) {
  if (std::find(kRecipes.begin(), kRecipes.end(), recipe) == kRecipes.end()) {
    err << "tune run: unknown recipe '" << recipe << "'; available recipes: " << recipe_list() << '\n';
    return 2;
  }
  for (const auto& o : overrides) {
    if (o.find('=') == std::string::npos || o.front() == '=') {
      err << "tune run: override '" << o << "' is not of the form key=value\n";
      return 2;
    }
  }
  try {
    auto root = config::apply_overrides(config::load_config_file(config_path), overrides);
    if (recipe == "async_grpo") {
      grpo::run_async_grpo(root, &out);
    } else {
      recipes::RunOptions options;
      options.recipe = recipe;
      options.log = &out;
      const auto report = recipes::run_sft(root, options);
      for (const auto& w : report.warnings) err << "warning: " << w << '\n';
      recipes::write_summary(report, out);
    }
  } catch (const std::exception& e) {
    err << "tune run " << recipe << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int generate_corpus(std::int64_t num_samples, std::uint64_t seed, const std::string& output, std::ostream& out,
                    std::ostream& err) {
  try {
    const auto samples = data::generate_corpus(num_samples, seed);
    if (output.empty() || output == "-") {
      data::write_jsonl(samples, out);
    } else {
      std::ofstream file(output);
      if (!file) throw std::runtime_error("cannot open " + output + " for writing");
      data::write_jsonl(samples, file);
      if (!file) throw std::runtime_error("failed writing " + output);
      err << "wrote " << samples.size() << " samples to " << output << '\n';
    }
  } catch (const std::exception& e) {
    err << "tune generate-corpus: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"minitune post-training recipes", "tune"};
  app.require_subcommand(1);

  std::string recipe, config_path;
  std::vector<std::string> overrides;
  auto* run = app.add_subcommand("run", "Run a recipe from a YAML config");
  run->add_option("recipe", recipe, "Recipe: " + recipe_list())->required();
  run->add_option("--config", config_path, "YAML config path")->required();
  run->add_option("overrides", overrides, "key=value overrides applied before ${} references resolve");

  std::int64_t num_samples = 0;
  std::uint64_t seed = 0;
  std::string output;
  auto* gen = app.add_subcommand("generate-corpus", "Write a synthetic instruction corpus as JSON lines");
  gen->add_option("--num-samples", num_samples, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--output", output, "Output path (stdout when omitted)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      if (!app.get_subcommands().empty()) out << app.get_subcommands().front()->help();
      return 0;
    }
    err << "tune: " << e.what() << '\n';
    if (run->parsed() && recipe.empty()) err << "available recipes: " << recipe_list() << '\n';
    err << "run 'tune --help' for usage\n";
    return 2;
  }
  if (run->parsed()) return run_recipe(recipe, config_path, overrides, out, err);
  return generate_corpus(num_samples, seed, output, out, err);
}

}  // namespace minitune::cli
