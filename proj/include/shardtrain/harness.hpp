// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shardtrain/data.hpp"
#include "shardtrain/metrics.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/optimizer.hpp"
#include "shardtrain/strategy.hpp"

namespace shardtrain {

/// kWall measures each epoch with a monotonic clock. kSimulated converts the
/// counted flops, collective bytes, and collective calls into seconds on a
/// fixed simulated device, which makes the CSV reproducible byte for byte.
enum class TimingMode { kWall, kSimulated };

TimingMode parse_timing_mode(std::string_view name);
std::string_view to_string(TimingMode mode);

struct RunConfig {
  std::string strategy = "single";
  int world = 1;
  ModelConfig model;
  std::size_t seq_len = 64;  // tokens per dataset sequence; the model sees seq_len - 1 positions
  std::size_t batch = 8;     // global batch, in sequences
  std::size_t epochs = 5;
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  std::size_t bucket_cap = kDefaultBucketCap;
  std::size_t accum = 1;
  std::uint64_t seed = 0;
  std::filesystem::path corpus;  // empty: synthetic corpus
  VocabMode vocab_mode = VocabMode::kByte;
  std::size_t synthetic_tokens = 100000;
  std::size_t max_steps = 0;  // optimizer steps per epoch; 0 means the whole epoch
  std::filesystem::path out;  // empty: nothing written
  TimingMode timing = TimingMode::kWall;
  bool count_activations = false;
  bool time_data_loading = false;  // wall timing only: include batch assembly in epoch time

  /// Checks invariants and forces world = 1 for the single strategy.
  void validate();
};

/// Applies one `key=value` setting; keys match the CLI flag names without
/// the leading dashes.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);
std::vector<std::string> setting_keys();

/// Flat `key=value` text; blank lines and lines starting with '#' are ignored.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
/// One config path per line, resolved relative to the manifest's directory.
std::vector<RunConfig> load_manifest(const std::filesystem::path& path);

/// Builds the token dataset described by the config. For a corpus, the
/// model's vocab_size is replaced by the tokenizer's vocabulary size.
TokenDataset build_dataset(RunConfig& config);

struct StepEvent {
  int rank = 0;
  std::size_t epoch = 0;        // 1-based
  std::size_t global_step = 0;  // 1-based, across epochs
  TrainingStrategy& strategy;
};

struct RunHooks {
  /// Called on every worker thread after each optimizer step. Collective
  /// calls made here must be made by every rank.
  std::function<void(StepEvent&)> after_step;
};

struct RunResult {
  RunConfig config;
  std::vector<EpochRecord> records;
  RunSummary summary;
  double initial_loss = 0.0;  // per-token loss of the first global batch before any update
  ParameterSet final_parameters;
  std::vector<std::uint8_t> checkpoint_bytes;
  std::string csv;
  std::filesystem::path checkpoint_path;
  std::filesystem::path csv_path;
  std::vector<std::size_t> rank_final_transient_bytes;
};

inline constexpr std::string_view kMetricsFile = "metrics.csv";
inline constexpr std::string_view kCheckpointFile = "checkpoint.bin";
inline constexpr std::string_view kSummaryFile = "summary.txt";

RunResult run_experiment(RunConfig config, const RunHooks& hooks = {});

std::string format_summary(const RunResult& result);

struct Comparison {
  std::vector<std::string> strategies;
  std::vector<RunSummary> summaries;
  std::string table;
  std::string csv;
  std::optional<bool> fsdp_memory_below_ddp;
  std::vector<bool> loss_decreased;  // per run: last epoch loss < first epoch loss
};

/// Refuses runs that differ in model, data, or seed.
void check_comparable(const std::vector<RunConfig>& configs);
Comparison compare_results(const std::vector<RunResult>& results);
Comparison compare_strategies(const std::vector<RunConfig>& configs);

}  // namespace shardtrain
