// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/ddp.hpp"

#include <algorithm>
#include <cmath>

#include "shardtrain/error.hpp"

namespace shardtrain {

std::vector<BucketLayout> allocate_buckets(std::span<const std::size_t> parameter_sizes, std::size_t cap) {
  if (cap == 0) throw ValidationError("bucket size cap must be positive");
  std::vector<BucketLayout> buckets;
  BucketLayout current;
  auto close = [&] {
    if (!current.views.empty()) buckets.push_back(std::move(current));
    current = {};
  };
  for (std::size_t k = parameter_sizes.size(); k-- > 0;) {
    const std::size_t size = parameter_sizes[k];
    if (size > cap) {
      close();
      current.views.push_back({k, 0, size});
      current.size = size;
      close();
      continue;
    }
    if (current.size + size > cap) close();
    current.views.push_back({k, current.size, size});
    current.size += size;
  }
  close();
  return buckets;
}

DistributedDataParallel::DistributedDataParallel(ModelConfig config, ParameterSet params, Communicator comm,
                                                 std::size_t bucket_cap, OptimizerConfig optimizer,
                                                 MemoryLedger* ledger)
    : config_(config),
      params_(std::move(params)),
      comm_(comm),
      cap_(bucket_cap),
      optimizer_(optimizer, params_.total_parameter_count()),
      ledger_(ledger) {
  if (bucket_cap == 0) throw ValidationError("bucket size cap must be positive");

  // Replicas start from rank 0's state.
  for (auto& p : params_) comm_.broadcast(p.tensor.mutable_values(), 0);

  std::vector<std::size_t> sizes;
  std::size_t offset = 0;
  for (const auto& p : params_) {
    sizes.push_back(p.tensor.numel());
    state_offset_.push_back(offset);
    offset += p.tensor.numel();
  }
  auto layouts = allocate_buckets(sizes, cap_);
  location_.resize(params_.size());
  slot_.resize(params_.size());
  for (std::size_t b = 0; b < layouts.size(); ++b) {
    Bucket bucket;
    bucket.index = b;
    bucket.capacity = std::max(cap_, layouts[b].size);
    bucket.buffer.assign(layouts[b].size, 0.0);
    bucket.views = layouts[b].views;
    bucket.view_ready.assign(bucket.views.size(), false);
    for (std::size_t v = 0; v < bucket.views.size(); ++v) {
      location_[bucket.views[v].parameter_index] = {b, bucket.views[v].offset};
      slot_[bucket.views[v].parameter_index] = v;
    }
    buckets_.push_back(std::move(bucket));
  }

  params_.attach_accumulators();
  for (auto& p : params_) {
    p.tensor.set_requires_grad(true);
    p.tensor.add_post_hook([this](std::size_t index) { autograd_hook(index); });
  }

  if (ledger_ != nullptr) {
    const std::size_t bytes = params_.total_parameter_count() * sizeof(double);
    ledger_->alloc(MemoryTag::kParameter, bytes);
    ledger_->alloc(MemoryTag::kGradient, bytes);
    ledger_->alloc(MemoryTag::kBucket, bytes);
    if (optimizer_.state_bytes() > 0) ledger_->alloc(MemoryTag::kOptimizerState, optimizer_.state_bytes());
  }
}

std::pair<std::size_t, std::size_t> DistributedDataParallel::location(std::size_t parameter_index) const {
  return location_.at(parameter_index);
}

void DistributedDataParallel::prepare_for_backward(const std::set<std::size_t>& unused) {
  for (auto& b : buckets_) {
    if (b.launched && !b.pending.done()) throw StateError("new iteration while an all-reduce is in flight");
    std::fill(b.buffer.begin(), b.buffer.end(), 0.0);
    std::fill(b.view_ready.begin(), b.view_ready.end(), false);
    b.ready_count = 0;
    b.ready = false;
    b.launched = false;
  }
  next_launch_ = 0;
  all_waited_ = false;
  launch_order_.clear();
  for (std::size_t index : unused) {
    auto [b, off] = location_.at(index);
    Bucket& bucket = buckets_[b];
    bucket.view_ready[slot_[index]] = true;
    if (++bucket.ready_count == bucket.views.size()) bucket.ready = true;
  }
}

DdpForwardResult DistributedDataParallel::forward(const TokenBatch& batch, const ForwardOptions& options) {
  params_.zero_grad();
  tape_ = std::make_unique<Tape>();
  DdpForwardResult out;
  {
    TapeScope scope(*tape_);
    LossResult r = model_loss(config_, params_, batch, options);
    out.logits = r.logits;
    out.loss = r.mean_loss;
    out.total_loss = r.total_loss;
    out.token_count = r.token_count;
  }
  loss_ = out.loss;
  out.unused = count_unused_parameters(*tape_, loss_, params_);
  prepare_for_backward(out.unused);
  if (ledger_ != nullptr) {
    activation_bytes_ = tape_->activation_bytes();
    ledger_->alloc(MemoryTag::kActivation, activation_bytes_);
  }
  return out;
}

void DistributedDataParallel::backward() {
  if (!tape_ || tape_->consumed()) throw StateError("DDP backward without a preceding forward");
  tape_->backward(loss_);
  // Covers iterations in which no hook fired after the last bucket became ready.
  launch_ready_in_order();
  if (next_launch_ != buckets_.size()) {
    throw StateError("backward finished with bucket " + std::to_string(next_launch_) + " not ready");
  }
  wait_all();
  tape_.reset();
  loss_ = Tensor();
  if (ledger_ != nullptr) {
    ledger_->free(MemoryTag::kActivation, activation_bytes_);
    activation_bytes_ = 0;
  }
}

void DistributedDataParallel::autograd_hook(std::size_t parameter_index) {
  auto [b, offset] = location_.at(parameter_index);
  Bucket& bucket = buckets_[b];
  const std::size_t slot = slot_[parameter_index];
  if (bucket.view_ready[slot]) {
    throw InvariantError("autograd hook for parameter " + std::to_string(parameter_index) + " which is already ready");
  }
  Tensor& var = params_[parameter_index].tensor;
  std::span<double> view(bucket.buffer.data() + offset, var.numel());
  if (var.has_grad()) {
    auto g = var.grad();
    std::copy(g.begin(), g.end(), view.begin());
  } else {
    std::fill(view.begin(), view.end(), 0.0);
  }
  bucket.view_ready[slot] = true;
  if (++bucket.ready_count == bucket.views.size()) bucket.ready = true;
  launch_ready_in_order();
  if (next_launch_ == buckets_.size()) wait_all();
}

void DistributedDataParallel::launch_ready_in_order() {
  while (next_launch_ < buckets_.size() && buckets_[next_launch_].ready) {
    Bucket& bucket = buckets_[next_launch_];
    bucket.pending = comm_.launch_all_reduce_sum(bucket.buffer);
    bucket.launched = true;
    launch_order_.push_back(next_launch_);
    ++next_launch_;
  }
}

void DistributedDataParallel::wait_all() {
  if (all_waited_) return;
  for (auto& b : buckets_) b.pending.wait();
  all_waited_ = true;
  launch_history_.push_back(launch_order_);
}

double DistributedDataParallel::step(double lr) {
  if (!all_waited_) throw StateError("DDP step before all bucket all-reduces completed");
  const double inv_world = 1.0 / static_cast<double>(comm_.world_size());
  double sq = 0.0;
  for (auto& b : buckets_) {
    for (double& v : b.buffer) {
      v *= inv_world;
      sq += v * v;
    }
  }
  optimizer_.begin_step();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto [b, offset] = location_[i];
    Tensor& var = params_[i].tensor;
    auto g = var.mutable_grad();
    std::copy_n(buckets_[b].buffer.begin() + static_cast<std::ptrdiff_t>(offset), g.size(), g.begin());
    optimizer_.update(var.mutable_values(), g, state_offset_[i], lr);
  }
  all_waited_ = false;
  return std::sqrt(sq);
}

}  // namespace shardtrain
