// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "shardtrain/collectives.hpp"
#include "shardtrain/metrics.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/optimizer.hpp"
#include "shardtrain/tape.hpp"

namespace shardtrain {

/// Elements; 2^15 doubles = 256 KiB, which splits the desk model into
/// several buckets.
inline constexpr std::size_t kDefaultBucketCap = std::size_t{1} << 15;

struct BucketView {
  std::size_t parameter_index = 0;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct BucketLayout {
  std::vector<BucketView> views;
  std::size_t size = 0;
};

/// Greedy bucket assignment over the parameters in reverse order. A new
/// bucket starts when the next parameter would push the current one past
/// `cap`; a parameter larger than `cap` gets a bucket of its own.
std::vector<BucketLayout> allocate_buckets(std::span<const std::size_t> parameter_sizes, std::size_t cap);

struct Bucket {
  std::size_t index = 0;
  std::size_t capacity = 0;
  std::vector<double> buffer;
  std::vector<BucketView> views;
  std::vector<bool> view_ready;
  std::size_t ready_count = 0;
  bool ready = false;
  bool launched = false;
  PendingCollective pending;
};

struct DdpForwardResult {
  Tensor logits;
  Tensor loss;  // mean over local tokens
  double total_loss = 0.0;
  std::size_t token_count = 0;
  std::set<std::size_t> unused;
};

/// Data-parallel replica for one rank: rank 0's parameters are broadcast at
/// construction, gradients are copied into bucket views by accumulator
/// post-hooks, and ready buckets are all-reduced in ascending index order.
class DistributedDataParallel {
 public:
  DistributedDataParallel(ModelConfig config, ParameterSet params, Communicator comm,
                          std::size_t bucket_cap = kDefaultBucketCap, OptimizerConfig optimizer = {},
                          MemoryLedger* ledger = nullptr);
  DistributedDataParallel(const DistributedDataParallel&) = delete;
  DistributedDataParallel& operator=(const DistributedDataParallel&) = delete;

  /// Local forward and loss under a fresh tape; parameters with no path to
  /// the loss are marked ready in their buckets.
  DdpForwardResult forward(const TokenBatch& batch, const ForwardOptions& options = {});
  /// Backward over the last forward's tape. Hooks drive the all-reduces;
  /// returns once every bucket has been reduced.
  void backward();

  /// Resets bucket readiness for a new iteration and pre-marks `unused`.
  void prepare_for_backward(const std::set<std::size_t>& unused);
  /// Post-accumulation hook body for one parameter.
  void autograd_hook(std::size_t parameter_index);

  /// Averages the reduced gradients, writes them back to the parameters and
  /// applies the optimizer. Returns the global gradient L2 norm.
  double step(double lr);

  bool reduction_complete() const noexcept { return all_waited_; }
  const std::vector<Bucket>& buckets() const noexcept { return buckets_; }
  /// (bucket index, offset) of a parameter.
  std::pair<std::size_t, std::size_t> location(std::size_t parameter_index) const;
  /// Bucket indices in the order their all-reduces were launched this step.
  const std::vector<std::size_t>& launch_order() const noexcept { return launch_order_; }
  const std::vector<std::vector<std::size_t>>& launch_history() const noexcept { return launch_history_; }

  ParameterSet& parameters() noexcept { return params_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  const ModelConfig& config() const noexcept { return config_; }
  Communicator& communicator() noexcept { return comm_; }
  const Optimizer& optimizer() const noexcept { return optimizer_; }

 private:
  void launch_ready_in_order();
  void wait_all();

  ModelConfig config_;
  ParameterSet params_;
  Communicator comm_;
  std::size_t cap_;
  Optimizer optimizer_;
  MemoryLedger* ledger_;

  std::vector<Bucket> buckets_;
  std::vector<std::pair<std::size_t, std::size_t>> location_;  // per parameter
  std::vector<std::size_t> slot_;                              // view index within bucket
  std::vector<std::size_t> state_offset_;                      // optimizer offset per parameter
  std::size_t next_launch_ = 0;
  bool all_waited_ = false;
  std::vector<std::size_t> launch_order_;
  std::vector<std::vector<std::size_t>> launch_history_;

  std::unique_ptr<Tape> tape_;
  Tensor loss_;
  std::size_t activation_bytes_ = 0;
};

}  // namespace shardtrain
