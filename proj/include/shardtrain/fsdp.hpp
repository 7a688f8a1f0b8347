// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "shardtrain/collectives.hpp"
#include "shardtrain/metrics.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/optimizer.hpp"
#include "shardtrain/tape.hpp"

namespace shardtrain {

struct FsdpParamSlot {
  std::size_t parameter_index = 0;
  std::size_t offset = 0;  // within the unit's flat buffer
  Shape shape;
  std::size_t numel = 0;
};

/// A group of parameters flattened, zero-padded to a multiple of the world
/// size, and split into equal per-rank shards.
struct FsdpUnit {
  std::size_t unit_id = 0;
  std::vector<std::string> member_names;
  std::vector<FsdpParamSlot> slots;
  std::size_t unpadded_len = 0;
  std::size_t flat_full_len = 0;
  std::size_t shard_len = 0;

  /// Number of non-padding elements in `rank`'s shard.
  std::size_t valid_in_shard(int rank) const;
};

std::vector<FsdpUnit> plan_fsdp_units(const ParameterSet& params,
                                      const std::vector<std::vector<std::size_t>>& plan, int world_size);

/// Flattens one unit's parameters (in slot order) and pads with zeros.
std::vector<double> flatten_unit(const FsdpUnit& unit, const ParameterSet& params);

/// Rank-resident state of one unit.
struct ShardedParameter {
  std::size_t unit = 0;
  std::vector<double> params;
  std::vector<double> grads;
  std::size_t state_offset = 0;  // into the optimizer's flat state
};

struct AccumulationState {
  std::size_t micro_step = 0;
  std::size_t factor = 1;
};

struct FsdpForwardResult {
  Tensor logits;
  Tensor loss;
  double total_loss = 0.0;
  std::size_t token_count = 0;
};

/// Fully sharded data parallel worker for one rank. Only shards stay
/// resident between steps; each unit's full parameters are all-gathered
/// for its forward, freed, re-gathered just before its backward, and its
/// gradients are reduce-scattered into the owning shards.
class FullyShardedDataParallel {
 public:
  FullyShardedDataParallel(ModelConfig config, ParameterSet params, Communicator comm, OptimizerConfig optimizer = {},
                           std::size_t accumulation = 1, MemoryLedger* ledger = nullptr);
  ~FullyShardedDataParallel();
  FullyShardedDataParallel(const FullyShardedDataParallel&) = delete;
  FullyShardedDataParallel& operator=(const FullyShardedDataParallel&) = delete;

  FsdpForwardResult forward(const TokenBatch& batch, const ForwardOptions& options = {});
  void backward();
  /// Applies the optimizer to the local shards once `factor` micro-batches
  /// have been accumulated. Returns the global gradient norm when a step
  /// was taken.
  std::optional<double> step(double lr);

  /// All-gathers unit `u` into its parameter tensors.
  void unit_forward_gather(std::size_t u);
  /// Drops unit `u`'s full parameter storage.
  void unit_release(std::size_t u);
  /// Reduce-scatters unit `u`'s full gradients into the local shard and frees
  /// the full buffers.
  void unit_backward_reduce(std::size_t u);

  /// Collective: every rank receives the full, unpadded parameters.
  ParameterSet gather_full_parameters();

  const std::vector<FsdpUnit>& units() const noexcept { return units_; }
  const std::vector<ShardedParameter>& shards() const noexcept { return shards_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  const Optimizer& optimizer() const noexcept { return optimizer_; }
  const AccumulationState& accumulation() const noexcept { return accumulation_; }
  Communicator& communicator() noexcept { return comm_; }
  std::size_t total_shard_len() const noexcept { return total_shard_len_; }

 private:
  enum class Phase { kIdle, kForwardGathered, kForwardReleased, kBackwardGathered, kReduced };
  class Observer;

  void on_pre_backward(std::size_t u);
  void on_parameter_ready(std::size_t parameter_index);

  ModelConfig config_;
  ParameterSet params_;
  Communicator comm_;
  std::vector<FsdpUnit> units_;
  std::vector<ShardedParameter> shards_;
  std::vector<std::size_t> unit_of_;
  std::size_t total_shard_len_ = 0;
  Optimizer optimizer_;
  AccumulationState accumulation_;
  MemoryLedger* ledger_;

  std::vector<Phase> phase_;
  std::vector<std::size_t> ready_count_;
  std::unique_ptr<Observer> observer_;
  std::unique_ptr<Tape> tape_;
  Tensor loss_;
  std::size_t activation_bytes_ = 0;
};

}  // namespace shardtrain
