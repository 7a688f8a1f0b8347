// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/fsdp.hpp"

#include <algorithm>
#include <cmath>

#include "shardtrain/error.hpp"

namespace shardtrain {

std::size_t FsdpUnit::valid_in_shard(int rank) const {
  const std::size_t start = static_cast<std::size_t>(rank) * shard_len;
  if (start >= unpadded_len) return 0;
  return std::min(shard_len, unpadded_len - start);
}

std::vector<FsdpUnit> plan_fsdp_units(const ParameterSet& params, const std::vector<std::vector<std::size_t>>& plan,
                                      int world_size) {
  if (world_size < 1) throw ValidationError("world size must be at least 1");
  const auto w = static_cast<std::size_t>(world_size);
  std::vector<FsdpUnit> units;
  std::vector<bool> seen(params.size(), false);
  for (std::size_t u = 0; u < plan.size(); ++u) {
    if (plan[u].empty()) throw ValidationError("FSDP unit " + std::to_string(u) + " has no parameters");
    FsdpUnit unit;
    unit.unit_id = u;
    for (std::size_t index : plan[u]) {
      if (index >= params.size() || seen[index]) {
        throw ValidationError("FSDP unit plan references parameter " + std::to_string(index) +
                              " out of range or twice");
      }
      seen[index] = true;
      const Tensor& t = params[index].tensor;
      unit.member_names.push_back(params[index].name);
      unit.slots.push_back({index, unit.unpadded_len, t.shape(), t.numel()});
      unit.unpadded_len += t.numel();
    }
    unit.flat_full_len = (unit.unpadded_len + w - 1) / w * w;
    unit.shard_len = unit.flat_full_len / w;
    units.push_back(std::move(unit));
  }
  return units;
}

std::vector<double> flatten_unit(const FsdpUnit& unit, const ParameterSet& params) {
  std::vector<double> flat(unit.flat_full_len, 0.0);
  for (const auto& slot : unit.slots) {
    auto v = params[slot.parameter_index].tensor.values();
    std::copy(v.begin(), v.end(), flat.begin() + static_cast<std::ptrdiff_t>(slot.offset));
  }
  return flat;
}

class FullyShardedDataParallel::Observer : public UnitObserver {
 public:
  explicit Observer(FullyShardedDataParallel& owner) : owner_(owner) {}

  void before_unit(std::size_t unit) override { owner_.unit_forward_gather(unit); }

  Tensor after_unit(std::size_t unit, Tensor output) override {
    owner_.unit_release(unit);
    return with_backward_hook(output, [this, unit] { owner_.on_pre_backward(unit); });
  }

 private:
  FullyShardedDataParallel& owner_;
};

FullyShardedDataParallel::FullyShardedDataParallel(ModelConfig config, ParameterSet params, Communicator comm,
                                                   OptimizerConfig optimizer, std::size_t accumulation,
                                                   MemoryLedger* ledger)
    : config_(config),
      params_(std::move(params)),
      comm_(comm),
      units_(plan_fsdp_units(params_, unit_plan(config_), comm.world_size())),
      optimizer_(optimizer, [&] {
        std::size_t n = 0;
        for (const auto& u : units_) n += u.shard_len;
        return n;
      }()),
      ledger_(ledger) {
  if (accumulation == 0) throw ValidationError("accumulation factor must be at least 1");
  accumulation_.factor = accumulation;

  for (auto& p : params_) comm_.broadcast(p.tensor.mutable_values(), 0);

  unit_of_.assign(params_.size(), units_.size());
  const int rank = comm_.rank();
  for (std::size_t u = 0; u < units_.size(); ++u) {
    const FsdpUnit& unit = units_[u];
    std::vector<double> flat = flatten_unit(unit, params_);
    ShardedParameter shard;
    shard.unit = u;
    auto begin = flat.begin() + static_cast<std::ptrdiff_t>(rank * unit.shard_len);
    shard.params.assign(begin, begin + static_cast<std::ptrdiff_t>(unit.shard_len));
    shard.grads.assign(unit.shard_len, 0.0);
    shard.state_offset = total_shard_len_;
    total_shard_len_ += unit.shard_len;
    shards_.push_back(std::move(shard));
    for (const auto& slot : unit.slots) {
      unit_of_[slot.parameter_index] = u;
      params_[slot.parameter_index].tensor.release_storage();
    }
  }

  params_.attach_accumulators();
  for (auto& p : params_) {
    p.tensor.set_requires_grad(true);
    p.tensor.add_post_hook([this](std::size_t index) { on_parameter_ready(index); });
  }
  phase_.assign(units_.size(), Phase::kIdle);
  ready_count_.assign(units_.size(), 0);
  observer_ = std::make_unique<Observer>(*this);

  if (ledger_ != nullptr) {
    ledger_->alloc(MemoryTag::kParameter, total_shard_len_ * sizeof(double));
    ledger_->alloc(MemoryTag::kGradient, total_shard_len_ * sizeof(double));
    if (optimizer_.state_bytes() > 0) ledger_->alloc(MemoryTag::kOptimizerState, optimizer_.state_bytes());
  }
}

FullyShardedDataParallel::~FullyShardedDataParallel() = default;

void FullyShardedDataParallel::unit_forward_gather(std::size_t u) {
  const FsdpUnit& unit = units_.at(u);
  std::vector<double> full = comm_.all_gather(shards_[u].params);
  for (const auto& slot : unit.slots) {
    auto begin = full.begin() + static_cast<std::ptrdiff_t>(slot.offset);
    params_[slot.parameter_index].tensor.assign_storage(
        std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(slot.numel)));
  }
  if (ledger_ != nullptr) ledger_->alloc(MemoryTag::kGatheredParameter, unit.flat_full_len * sizeof(double));
  phase_[u] = Phase::kForwardGathered;
}

void FullyShardedDataParallel::unit_release(std::size_t u) {
  const FsdpUnit& unit = units_.at(u);
  for (const auto& slot : unit.slots) params_[slot.parameter_index].tensor.release_storage();
  if (ledger_ != nullptr) ledger_->free(MemoryTag::kGatheredParameter, unit.flat_full_len * sizeof(double));
  phase_[u] = Phase::kForwardReleased;
}

void FullyShardedDataParallel::on_pre_backward(std::size_t u) {
  if (phase_[u] != Phase::kForwardReleased) throw StateError("unit " + std::to_string(u) + " backward before forward");
  unit_forward_gather(u);
  if (ledger_ != nullptr) ledger_->alloc(MemoryTag::kGatheredGradient, units_[u].flat_full_len * sizeof(double));
  phase_[u] = Phase::kBackwardGathered;
}

void FullyShardedDataParallel::on_parameter_ready(std::size_t parameter_index) {
  const std::size_t u = unit_of_.at(parameter_index);
  if (u == units_.size()) return;  // not part of any unit
  if (++ready_count_[u] == units_[u].slots.size()) unit_backward_reduce(u);
}

void FullyShardedDataParallel::unit_backward_reduce(std::size_t u) {
  const FsdpUnit& unit = units_.at(u);
  const bool gathered = phase_[u] == Phase::kBackwardGathered;
  if (!gathered && phase_[u] != Phase::kForwardReleased) {
    throw StateError("unit " + std::to_string(u) + " gradient reduction before its forward");
  }
  std::vector<double> flat(unit.flat_full_len, 0.0);
  for (const auto& slot : unit.slots) {
    Tensor& t = params_[slot.parameter_index].tensor;
    if (t.has_grad()) {
      auto g = t.grad();
      std::copy(g.begin(), g.end(), flat.begin() + static_cast<std::ptrdiff_t>(slot.offset));
    }
    t.clear_grad();
  }
  std::vector<double> piece = comm_.reduce_scatter(flat);
  auto& grads = shards_[u].grads;
  for (std::size_t i = 0; i < piece.size(); ++i) grads[i] += piece[i];
  if (gathered) {
    unit_release(u);
    if (ledger_ != nullptr) ledger_->free(MemoryTag::kGatheredGradient, unit.flat_full_len * sizeof(double));
  }
  phase_[u] = Phase::kReduced;
}

FsdpForwardResult FullyShardedDataParallel::forward(const TokenBatch& batch, const ForwardOptions& options) {
  if (tape_) throw StateError("FSDP forward while a previous iteration awaits backward");
  std::fill(phase_.begin(), phase_.end(), Phase::kIdle);
  std::fill(ready_count_.begin(), ready_count_.end(), 0);
  tape_ = std::make_unique<Tape>();
  FsdpForwardResult out;
  {
    TapeScope scope(*tape_);
    ForwardOptions opts = options;
    opts.observer = observer_.get();
    LossResult r = model_loss(config_, params_, batch, opts);
    out.logits = r.logits;
    out.loss = r.mean_loss;
    out.total_loss = r.total_loss;
    out.token_count = r.token_count;
  }
  loss_ = out.loss;
  if (ledger_ != nullptr) {
    activation_bytes_ = tape_->activation_bytes();
    ledger_->alloc(MemoryTag::kActivation, activation_bytes_);
  }
  return out;
}

void FullyShardedDataParallel::backward() {
  if (!tape_) throw StateError("FSDP backward before forward");
  tape_->backward(loss_);
  // Units whose parameters did not all receive gradients still take part in
  // the reduction, in unit order on every rank.
  for (std::size_t u = units_.size(); u-- > 0;) {
    if (phase_[u] != Phase::kReduced) unit_backward_reduce(u);
  }
  tape_.reset();
  loss_ = Tensor();
  if (ledger_ != nullptr) {
    ledger_->free(MemoryTag::kActivation, activation_bytes_);
    activation_bytes_ = 0;
  }
  ++accumulation_.micro_step;
}

std::optional<double> FullyShardedDataParallel::step(double lr) {
  if (tape_) throw StateError("FSDP step before backward");
  if (accumulation_.micro_step == 0 || accumulation_.micro_step % accumulation_.factor != 0) return std::nullopt;
  const double inv = 1.0 / static_cast<double>(static_cast<std::size_t>(comm_.world_size()) * accumulation_.factor);
  double local_sq = 0.0;
  for (auto& shard : shards_) {
    for (double& g : shard.grads) {
      g *= inv;
      local_sq += g * g;
    }
  }
  double global_sq = local_sq;
  comm_.all_reduce_sum(std::span<double>(&global_sq, 1));

  optimizer_.begin_step();
  for (std::size_t u = 0; u < units_.size(); ++u) {
    auto& shard = shards_[u];
    const std::size_t valid = units_[u].valid_in_shard(comm_.rank());
    optimizer_.update(std::span<double>(shard.params.data(), valid),
                      std::span<const double>(shard.grads.data(), valid), shard.state_offset, lr);
    std::fill(shard.grads.begin(), shard.grads.end(), 0.0);
  }
  return std::sqrt(global_sq);
}

ParameterSet FullyShardedDataParallel::gather_full_parameters() {
  ParameterSet out;
  std::vector<std::vector<double>> values(params_.size());
  for (std::size_t u = 0; u < units_.size(); ++u) {
    std::vector<double> full = comm_.all_gather(shards_[u].params);
    for (const auto& slot : units_[u].slots) {
      auto begin = full.begin() + static_cast<std::ptrdiff_t>(slot.offset);
      values[slot.parameter_index].assign(begin, begin + static_cast<std::ptrdiff_t>(slot.numel));
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (values[i].empty()) throw InvariantError("parameter " + params_[i].name + " is not covered by any unit");
    out.add(params_[i].name, Tensor::from(params_[i].tensor.shape(), std::move(values[i]), true));
  }
  return out;
}

}  // namespace shardtrain
