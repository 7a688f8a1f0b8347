// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shardtrain {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Element-wise optimizer over a flat index space of `size` elements.
/// Callers update disjoint segments of that space, each addressed by its
/// offset into the state buffers. SGD keeps no state; Adam keeps first and
/// second moments of length `size` each.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::size_t size);

  /// Starts a new optimizer step (advances Adam's bias-correction counter).
  void begin_step();
  void update(std::span<double> values, std::span<const double> grads, std::size_t state_offset, double lr);

  std::size_t state_size() const noexcept { return size_; }
  std::size_t state_buffer_count() const noexcept { return config_.kind == OptimizerKind::kAdam ? 2 : 0; }
  std::size_t state_bytes() const noexcept { return state_buffer_count() * size_ * sizeof(double); }
  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t step_count() const noexcept { return steps_; }

 private:
  OptimizerConfig config_;
  std::size_t size_;
  std::size_t steps_ = 0;
  std::vector<double> first_moment_;
  std::vector<double> second_moment_;
};

}  // namespace shardtrain
