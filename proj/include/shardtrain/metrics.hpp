// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shardtrain {

/// Tokens per second. Throws ValidationError unless training_seconds > 0.
double throughput(double total_tokens, double training_seconds);

/// Total loss divided by the token count. Throws on zero tokens.
double per_token_loss(double total_loss, std::size_t total_tokens);

/// Running (Σ loss, Σ tokens) pair; merging sums both before dividing.
struct LossTally {
  double total_loss = 0.0;
  std::size_t tokens = 0;

  void add(double loss, std::size_t count) {
    total_loss += loss;
    tokens += count;
  }
  void merge(const LossTally& other) { add(other.total_loss, other.tokens); }
  double per_token() const { return per_token_loss(total_loss, tokens); }
};

/// Global L2 norm over every element of every gradient buffer.
double grad_l2_norm(std::span<const std::span<const double>> grads);

struct NormalizedGradients {
  std::vector<std::vector<double>> grads;
  double norm = 0.0;
  bool degenerate = false;  // zero norm; grads are returned as zeros
};

/// Divides every gradient element by the global L2 norm.
NormalizedGradients normalize_grad(std::span<const std::span<const double>> grads);

enum class MemoryTag {
  kParameter,
  kGradient,
  kOptimizerState,
  kBucket,
  kGatheredParameter,
  kGatheredGradient,
  kActivation,
};

inline constexpr std::size_t kMemoryTagCount = 7;

std::string_view to_string(MemoryTag tag);
/// Transient tags must be fully released by the end of a run.
bool is_transient(MemoryTag tag);

struct LedgerEvent {
  bool alloc;
  MemoryTag tag;
  std::size_t bytes;
};

/// Simulated per-rank device memory. Counts tensor payload bytes by tag.
/// The headline figures (current, peak) exclude activations unless the
/// ledger was created with count_activations = true.
class MemoryLedger {
 public:
  explicit MemoryLedger(bool count_activations = false) : count_activations_(count_activations) {}

  void alloc(MemoryTag tag, std::size_t bytes);
  /// Throws AccountingError when `bytes` exceeds the live bytes of `tag`.
  void free(MemoryTag tag, std::size_t bytes);

  std::size_t current() const noexcept { return current_; }
  std::size_t peak() const noexcept { return peak_; }
  std::size_t live(MemoryTag tag) const noexcept { return live_[static_cast<std::size_t>(tag)]; }
  std::size_t transient_live() const;
  /// Starts a new peak window at the current level.
  void reset_peak() noexcept { peak_ = current_; }

  const std::vector<LedgerEvent>& events() const noexcept { return events_; }
  void clear_events() { events_.clear(); }

 private:
  bool counted(MemoryTag tag) const noexcept { return count_activations_ || tag != MemoryTag::kActivation; }

  bool count_activations_;
  std::size_t live_[kMemoryTagCount] = {};
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
  std::vector<LedgerEvent> events_;
};

/// One row of the per-epoch metrics CSV plus the raw counters it derives from.
struct EpochRecord {
  std::string strategy;
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double grad_norm = 0.0;
  double throughput = 0.0;
  std::size_t peak_mem_bytes = 0;  // max over ranks
  double wall_time_s = 0.0;

  double total_loss = 0.0;
  std::size_t total_tokens = 0;
  std::vector<double> step_grad_norms;
  std::vector<std::size_t> rank_peak_mem_bytes;
};

/// Derives the CSV columns from raw counters.
EpochRecord make_epoch_record(std::string strategy, std::size_t epoch, double total_loss, std::size_t total_tokens,
                              std::vector<double> step_grad_norms, std::vector<std::size_t> rank_peak_mem_bytes,
                              double wall_time_s);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

inline constexpr std::string_view kMetricsCsvHeader =
    "strategy,epoch,loss,grad_norm,throughput,peak_mem_bytes,wall_time_s";

std::string to_csv_row(const EpochRecord& record);

struct CsvEpochRow {
  std::string strategy;
  std::size_t epoch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double throughput = 0.0;
  std::size_t peak_mem_bytes = 0;
  double wall_time_s = 0.0;
};

std::vector<CsvEpochRow> parse_metrics_csv(std::string_view text);

/// Aggregates matching the comparison table rows.
struct RunSummary {
  double avg_loss = 0.0;
  double avg_grad_norm = 0.0;
  double total_training_time_s = 0.0;
  double avg_memory_bytes = 0.0;
  double avg_throughput = 0.0;  // Σ tokens / Σ wall time
  std::size_t max_peak_mem_bytes = 0;
  std::size_t total_tokens = 0;
};

RunSummary summarize(std::span<const EpochRecord> records);

}  // namespace shardtrain
