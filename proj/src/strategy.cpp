// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/strategy.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "shardtrain/error.hpp"
#include "shardtrain/tape.hpp"

namespace shardtrain {

RankMetrics TrainingStrategy::collect_metrics() {
  RankMetrics out = std::move(pending_);
  pending_ = {};
  return out;
}

void TrainingStrategy::record_micro_batch(const MicroBatchStats& stats) {
  pending_.total_loss += stats.loss_sum;
  pending_.tokens += stats.tokens;
}

void TrainingStrategy::record_step(double grad_norm) { pending_.step_grad_norms.push_back(grad_norm); }

SingleWorkerStrategy::SingleWorkerStrategy(StrategyContext context)
    : config_(context.model),
      params_(std::move(context.initial)),
      optimizer_(context.optimizer, params_.total_parameter_count()),
      accumulation_(context.accumulation),
      ledger_(context.ledger) {
  if (context.comm.world_size() != 1) throw ValidationError("the single strategy runs on exactly one worker");
  if (accumulation_ == 0) throw ValidationError("accumulation factor must be at least 1");
  std::size_t offset = 0;
  for (auto& p : params_) {
    p.tensor.set_requires_grad(true);
    state_offset_.push_back(offset);
    offset += p.tensor.numel();
  }
  if (ledger_ != nullptr) {
    ledger_->alloc(MemoryTag::kParameter, offset * sizeof(double));
    ledger_->alloc(MemoryTag::kGradient, offset * sizeof(double));
    if (optimizer_.state_bytes() > 0) ledger_->alloc(MemoryTag::kOptimizerState, optimizer_.state_bytes());
  }
}

MicroBatchStats SingleWorkerStrategy::forward_backward(const TokenBatch& batch) {
  Tape tape;
  TapeScope scope(tape);
  LossResult r = model_loss(config_, params_, batch);
  const std::size_t activations = tape.activation_bytes();
  if (ledger_ != nullptr) ledger_->alloc(MemoryTag::kActivation, activations);
  tape.backward(r.mean_loss);
  if (ledger_ != nullptr) ledger_->free(MemoryTag::kActivation, activations);
  ++micro_step_;
  MicroBatchStats stats{r.total_loss, r.token_count};
  record_micro_batch(stats);
  return stats;
}

std::optional<double> SingleWorkerStrategy::step(double lr) {
  if (micro_step_ == 0 || micro_step_ % accumulation_ != 0) return std::nullopt;
  const double inv = 1.0 / static_cast<double>(accumulation_);
  double sq = 0.0;
  for (auto& p : params_) {
    for (double& g : p.tensor.mutable_grad()) {
      g *= inv;
      sq += g * g;
    }
  }
  optimizer_.begin_step();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    optimizer_.update(t.mutable_values(), t.grad(), state_offset_[i], lr);
  }
  params_.zero_grad();
  const double norm = std::sqrt(sq);
  record_step(norm);
  return norm;
}

DdpStrategy::DdpStrategy(StrategyContext context) {
  if (context.accumulation != 1) throw ValidationError("the ddp strategy does not support gradient accumulation");
  ddp_ = std::make_unique<DistributedDataParallel>(context.model, std::move(context.initial), context.comm,
                                                   context.bucket_cap, context.optimizer, context.ledger);
}

MicroBatchStats DdpStrategy::forward_backward(const TokenBatch& batch) {
  DdpForwardResult r = ddp_->forward(batch);
  ddp_->backward();
  MicroBatchStats stats{r.total_loss, r.token_count};
  record_micro_batch(stats);
  return stats;
}

std::optional<double> DdpStrategy::step(double lr) {
  const double norm = ddp_->step(lr);
  record_step(norm);
  return norm;
}

FsdpStrategy::FsdpStrategy(StrategyContext context) {
  fsdp_ = std::make_unique<FullyShardedDataParallel>(context.model, std::move(context.initial), context.comm,
                                                     context.optimizer, context.accumulation, context.ledger);
}

MicroBatchStats FsdpStrategy::forward_backward(const TokenBatch& batch) {
  FsdpForwardResult r = fsdp_->forward(batch);
  fsdp_->backward();
  MicroBatchStats stats{r.total_loss, r.token_count};
  record_micro_batch(stats);
  return stats;
}

std::optional<double> FsdpStrategy::step(double lr) {
  auto norm = fsdp_->step(lr);
  if (norm) record_step(*norm);
  return norm;
}

namespace {

struct Registry {
  std::mutex mu;
  std::map<std::string, StrategyFactory> factories;

  Registry() {
    factories["single"] = [](StrategyContext c) { return std::make_unique<SingleWorkerStrategy>(std::move(c)); };
    factories["ddp"] = [](StrategyContext c) { return std::make_unique<DdpStrategy>(std::move(c)); };
    factories["fsdp"] = [](StrategyContext c) { return std::make_unique<FsdpStrategy>(std::move(c)); };
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_strategy(const std::string& name, StrategyFactory factory) {
  if (name.empty() || !factory) throw ValidationError("strategy registration needs a name and a factory");
  std::lock_guard lock(registry().mu);
  registry().factories[name] = std::move(factory);
}

bool strategy_registered(const std::string& name) {
  std::lock_guard lock(registry().mu);
  return registry().factories.count(name) != 0;
}

std::vector<std::string> registered_strategies() {
  std::lock_guard lock(registry().mu);
  std::vector<std::string> names;
  for (const auto& [name, factory] : registry().factories) names.push_back(name);
  return names;
}

std::unique_ptr<TrainingStrategy> make_strategy(const std::string& name, StrategyContext context) {
  StrategyFactory factory;
  {
    std::lock_guard lock(registry().mu);
    auto it = registry().factories.find(name);
    if (it == registry().factories.end()) throw ValidationError("unknown strategy '" + name + "'");
    factory = it->second;
  }
  return factory(std::move(context));
}

}  // namespace shardtrain
