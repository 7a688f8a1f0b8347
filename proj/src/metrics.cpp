// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "shardtrain/error.hpp"

namespace shardtrain {

double throughput(double total_tokens, double training_seconds) {
  if (!(training_seconds > 0.0)) throw ValidationError("throughput requires a positive training time");
  return total_tokens / training_seconds;
}

double per_token_loss(double total_loss, std::size_t total_tokens) {
  if (total_tokens == 0) throw ValidationError("per-token loss requires at least one token");
  return total_loss / static_cast<double>(total_tokens);
}

double grad_l2_norm(std::span<const std::span<const double>> grads) {
  if (grads.empty()) throw ValidationError("grad_l2_norm needs at least one gradient");
  double sq = 0.0;
  for (auto g : grads) {
    for (double v : g) sq += v * v;
  }
  return std::sqrt(sq);
}

NormalizedGradients normalize_grad(std::span<const std::span<const double>> grads) {
  NormalizedGradients out;
  out.norm = grad_l2_norm(grads);
  out.degenerate = out.norm == 0.0;
  for (auto g : grads) {
    std::vector<double> v(g.size(), 0.0);
    if (!out.degenerate) {
      for (std::size_t i = 0; i < g.size(); ++i) v[i] = g[i] / out.norm;
    }
    out.grads.push_back(std::move(v));
  }
  return out;
}

std::string_view to_string(MemoryTag tag) {
  switch (tag) {
    case MemoryTag::kParameter:
      return "parameter";
    case MemoryTag::kGradient:
      return "gradient";
    case MemoryTag::kOptimizerState:
      return "optimizer_state";
    case MemoryTag::kBucket:
      return "bucket";
    case MemoryTag::kGatheredParameter:
      return "gathered_parameter";
    case MemoryTag::kGatheredGradient:
      return "gathered_gradient";
    case MemoryTag::kActivation:
      return "activation";
  }
  return "unknown";
}

bool is_transient(MemoryTag tag) {
  return tag == MemoryTag::kGatheredParameter || tag == MemoryTag::kGatheredGradient ||
         tag == MemoryTag::kActivation;
}

void MemoryLedger::alloc(MemoryTag tag, std::size_t bytes) {
  live_[static_cast<std::size_t>(tag)] += bytes;
  if (counted(tag)) {
    current_ += bytes;
    peak_ = std::max(peak_, current_);
  }
  events_.push_back({true, tag, bytes});
}

void MemoryLedger::free(MemoryTag tag, std::size_t bytes) {
  std::size_t& live = live_[static_cast<std::size_t>(tag)];
  if (bytes > live) {
    throw AccountingError("ledger underflow: freeing " + std::to_string(bytes) + " bytes of " +
                          std::string(to_string(tag)) + " with only " + std::to_string(live) + " live");
  }
  live -= bytes;
  if (counted(tag)) current_ -= bytes;
  events_.push_back({false, tag, bytes});
}

std::size_t MemoryLedger::transient_live() const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < kMemoryTagCount; ++t) {
    if (is_transient(static_cast<MemoryTag>(t))) n += live_[t];
  }
  return n;
}

EpochRecord make_epoch_record(std::string strategy, std::size_t epoch, double total_loss, std::size_t total_tokens,
                              std::vector<double> step_grad_norms, std::vector<std::size_t> rank_peak_mem_bytes,
                              double wall_time_s) {
  EpochRecord r;
  r.strategy = std::move(strategy);
  r.epoch = epoch;
  r.total_loss = total_loss;
  r.total_tokens = total_tokens;
  r.loss = per_token_loss(total_loss, total_tokens);
  double norm_sum = 0.0;
  for (double n : step_grad_norms) norm_sum += n;
  r.grad_norm = step_grad_norms.empty() ? 0.0 : norm_sum / static_cast<double>(step_grad_norms.size());
  r.step_grad_norms = std::move(step_grad_norms);
  r.throughput = throughput(static_cast<double>(total_tokens), wall_time_s);
  r.wall_time_s = wall_time_s;
  r.peak_mem_bytes = rank_peak_mem_bytes.empty()
                         ? 0
                         : *std::max_element(rank_peak_mem_bytes.begin(), rank_peak_mem_bytes.end());
  r.rank_peak_mem_bytes = std::move(rank_peak_mem_bytes);
  return r;
}

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

std::string to_csv_row(const EpochRecord& r) {
  return r.strategy + "," + std::to_string(r.epoch) + "," + format_double(r.loss) + "," +
         format_double(r.grad_norm) + "," + format_double(r.throughput) + "," + std::to_string(r.peak_mem_bytes) +
         "," + format_double(r.wall_time_s);
}

namespace {

double parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("bad number '" + std::string(s) + "'");
  return v;
}

std::size_t parse_size(std::string_view s) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("bad integer '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::vector<CsvEpochRow> parse_metrics_csv(std::string_view text) {
  std::vector<CsvEpochRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsCsvHeader) throw ValidationError("unexpected metrics CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cols;
    std::string_view rest = line;
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      cols.push_back(rest.substr(0, pos));
    }
    cols.push_back(rest);
    if (cols.size() != 7) throw ValidationError("metrics CSV row has " + std::to_string(cols.size()) + " columns");
    rows.push_back({std::string(cols[0]), parse_size(cols[1]), parse_double(cols[2]), parse_double(cols[3]),
                    parse_double(cols[4]), parse_size(cols[5]), parse_double(cols[6])});
  }
  return rows;
}

RunSummary summarize(std::span<const EpochRecord> records) {
  RunSummary s;
  if (records.empty()) return s;
  double loss = 0.0, norm = 0.0, mem = 0.0;
  for (const auto& r : records) {
    loss += r.loss;
    norm += r.grad_norm;
    mem += static_cast<double>(r.peak_mem_bytes);
    s.total_training_time_s += r.wall_time_s;
    s.total_tokens += r.total_tokens;
    s.max_peak_mem_bytes = std::max(s.max_peak_mem_bytes, r.peak_mem_bytes);
  }
  const double n = static_cast<double>(records.size());
  s.avg_loss = loss / n;
  s.avg_grad_norm = norm / n;
  s.avg_memory_bytes = mem / n;
  s.avg_throughput = throughput(static_cast<double>(s.total_tokens), s.total_training_time_s);
  return s;
}

}  // namespace shardtrain
