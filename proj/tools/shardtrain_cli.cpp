// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shardtrain/error.hpp"
#include "shardtrain/harness.hpp"
#include "shardtrain/selftest.hpp"

namespace {

using namespace shardtrain;

int cmd_run(const std::optional<std::string>& config_path, const std::map<std::string, std::string>& flags) {
  RunConfig config = config_path ? load_run_config(*config_path) : RunConfig{};
  for (const auto& [key, value] : flags) apply_setting(config, key, value);
  RunResult result = run_experiment(config);
  std::cout << format_summary(result);
  std::cout << "initial loss " << format_double(result.initial_loss) << '\n';
  if (!result.csv_path.empty()) {
    std::cout << "metrics    " << result.csv_path.string() << '\n';
    std::cout << "checkpoint " << result.checkpoint_path.string() << '\n';
  } else {
    std::cout << '\n' << result.csv;
  }
  return 0;
}

int cmd_compare(const std::optional<std::string>& manifest, const std::vector<std::string>& config_paths,
                const std::optional<std::string>& csv_path) {
  std::vector<RunConfig> configs;
  std::filesystem::path beside;
  if (manifest) {
    configs = load_manifest(*manifest);
    beside = std::filesystem::path(*manifest).parent_path();
  }
  for (const auto& p : config_paths) {
    configs.push_back(load_run_config(p));
    if (beside.empty()) beside = std::filesystem::path(p).parent_path();
  }
  if (configs.empty()) throw ValidationError("compare needs a manifest or at least one --config");
  Comparison c = compare_strategies(configs);
  std::cout << c.table;
  const std::filesystem::path out = csv_path ? std::filesystem::path(*csv_path) : beside / "comparison.csv";
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw ValidationError("cannot write " + out.string());
  f << c.csv;
  std::cout << "csv " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-worker, DDP and FSDP training of a small GPT-2 on simulated workers"};
  app.require_subcommand(1);

  CLI::App* run = app.add_subcommand("run", "Train one configuration and write metrics and a checkpoint");
  std::optional<std::string> run_config;
  run->add_option("--config", run_config, "key=value config file applied before the flags");
  std::map<std::string, std::optional<std::string>> flag_values;
  for (const auto& key : setting_keys()) {
    flag_values[key];
    run->add_option("--" + key, flag_values[key], "setting '" + key + "'");
  }

  CLI::App* compare = app.add_subcommand("compare", "Run several configurations and print a comparison table");
  std::optional<std::string> manifest;
  std::vector<std::string> compare_configs;
  std::optional<std::string> compare_csv;
  compare->add_option("manifest", manifest, "file listing one config path per line");
  compare->add_option("--config", compare_configs, "config file for one run (repeatable)");
  compare->add_option("--csv", compare_csv, "where to write the comparison CSV");

  CLI::App* selftest = app.add_subcommand("selftest", "Run gradient, collective and equivalence checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (run->parsed()) {
      std::map<std::string, std::string> flags;
      for (const auto& [key, value] : flag_values) {
        if (value) flags[key] = *value;
      }
      return cmd_run(run_config, flags);
    }
    if (compare->parsed()) return cmd_compare(manifest, compare_configs, compare_csv);
    if (selftest->parsed()) return run_selftest(std::cout) ? 0 : 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
