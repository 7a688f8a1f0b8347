// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shardtrain/collectives.hpp"
#include "shardtrain/ddp.hpp"
#include "shardtrain/fsdp.hpp"
#include "shardtrain/metrics.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/optimizer.hpp"

namespace shardtrain {

/// Everything a strategy needs to build one rank's trainer.
struct StrategyContext {
  ModelConfig model;
  ParameterSet initial;  // the rank's own copy; replicas are synchronized by the strategy
  Communicator comm;
  OptimizerConfig optimizer;
  std::size_t bucket_cap = kDefaultBucketCap;
  std::size_t accumulation = 1;
  MemoryLedger* ledger = nullptr;
};

struct MicroBatchStats {
  double loss_sum = 0.0;
  std::size_t tokens = 0;
};

/// Per-rank counters accumulated since the last collect_metrics call.
struct RankMetrics {
  double total_loss = 0.0;
  std::size_t tokens = 0;
  std::vector<double> step_grad_norms;
};

/// One rank's training loop driver. All three strategies implement it; the
/// harness only talks to this interface.
class TrainingStrategy {
 public:
  virtual ~TrainingStrategy() = default;

  virtual std::string_view name() const = 0;
  /// Forward and backward over the rank's micro-batch.
  virtual MicroBatchStats forward_backward(const TokenBatch& batch) = 0;
  /// Takes an optimizer step once enough micro-batches are accumulated;
  /// returns the global gradient norm if it did.
  virtual std::optional<double> step(double lr) = 0;
  /// Collective for sharded strategies: the full, unpadded model.
  virtual ParameterSet full_parameters() = 0;
  virtual std::size_t accumulation() const = 0;

  RankMetrics collect_metrics();

 protected:
  void record_micro_batch(const MicroBatchStats& stats);
  void record_step(double grad_norm);

 private:
  RankMetrics pending_;
};

/// Plain training loop on one worker; reference behaviour for the others.
class SingleWorkerStrategy final : public TrainingStrategy {
 public:
  explicit SingleWorkerStrategy(StrategyContext context);

  std::string_view name() const override { return "single"; }
  MicroBatchStats forward_backward(const TokenBatch& batch) override;
  std::optional<double> step(double lr) override;
  ParameterSet full_parameters() override { return params_.deep_copy(); }
  std::size_t accumulation() const override { return accumulation_; }

 private:
  ModelConfig config_;
  ParameterSet params_;
  Optimizer optimizer_;
  std::vector<std::size_t> state_offset_;
  std::size_t accumulation_;
  std::size_t micro_step_ = 0;
  MemoryLedger* ledger_;
};

class DdpStrategy final : public TrainingStrategy {
 public:
  explicit DdpStrategy(StrategyContext context);

  std::string_view name() const override { return "ddp"; }
  MicroBatchStats forward_backward(const TokenBatch& batch) override;
  std::optional<double> step(double lr) override;
  ParameterSet full_parameters() override { return ddp_->parameters().deep_copy(); }
  std::size_t accumulation() const override { return 1; }

  DistributedDataParallel& engine() { return *ddp_; }

 private:
  std::unique_ptr<DistributedDataParallel> ddp_;
};

class FsdpStrategy final : public TrainingStrategy {
 public:
  explicit FsdpStrategy(StrategyContext context);

  std::string_view name() const override { return "fsdp"; }
  MicroBatchStats forward_backward(const TokenBatch& batch) override;
  std::optional<double> step(double lr) override;
  ParameterSet full_parameters() override { return fsdp_->gather_full_parameters(); }
  std::size_t accumulation() const override { return fsdp_->accumulation().factor; }

  FullyShardedDataParallel& engine() { return *fsdp_; }

 private:
  std::unique_ptr<FullyShardedDataParallel> fsdp_;
};

using StrategyFactory = std::function<std::unique_ptr<TrainingStrategy>(StrategyContext)>;

/// Adds a strategy under `name`; replaces any existing registration.
void register_strategy(const std::string& name, StrategyFactory factory);
bool strategy_registered(const std::string& name);
std::vector<std::string> registered_strategies();
std::unique_ptr<TrainingStrategy> make_strategy(const std::string& name, StrategyContext context);

}  // namespace shardtrain
