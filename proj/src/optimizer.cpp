// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/optimizer.hpp"

#include <cmath>

#include "shardtrain/error.hpp"
#include "shardtrain/work_counter.hpp"

namespace shardtrain {

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ValidationError("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd"; }

Optimizer::Optimizer(OptimizerConfig config, std::size_t size) : config_(config), size_(size) {
  if (config_.kind == OptimizerKind::kAdam) {
    first_moment_.assign(size, 0.0);
    second_moment_.assign(size, 0.0);
  }
}

void Optimizer::begin_step() { ++steps_; }

void Optimizer::update(std::span<double> values, std::span<const double> grads, std::size_t state_offset, double lr) {
  if (values.size() != grads.size() || state_offset + values.size() > size_) {
    throw DimensionError("optimizer segment [" + std::to_string(state_offset) + ", " +
                         std::to_string(state_offset + values.size()) + ") exceeds state of " +
                         std::to_string(size_) + " or mismatches gradient length");
  }
  if (steps_ == 0) throw StateError("optimizer update before begin_step");
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[i];
    count_flops(2 * values.size());
    return;
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < values.size(); ++i) {
    double& m = first_moment_[state_offset + i];
    double& v = second_moment_[state_offset + i];
    m = b1 * m + (1.0 - b1) * grads[i];
    v = b2 * v + (1.0 - b2) * grads[i] * grads[i];
    values[i] -= lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
  }
  count_flops(12 * values.size());
}

}  // namespace shardtrain
