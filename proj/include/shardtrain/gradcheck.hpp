// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "shardtrain/tensor.hpp"

namespace shardtrain {

struct GradcheckOptions {
  double step = 1e-5;
  double rel_tolerance = 1e-4;
  // Elements where both gradients are below this magnitude are compared
  // absolutely; central differences cannot resolve them relatively.
  double abs_floor = 1e-8;
  // Per-input cap on probed elements; larger inputs are sampled.
  std::size_t max_elements_per_input = 64;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

using ScalarFunction = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients of `f` against central finite
/// differences. `f` must return a [1] tensor built from `inputs`.
GradcheckResult gradcheck(const ScalarFunction& f, std::vector<Tensor> inputs, const GradcheckOptions& options = {});

}  // namespace shardtrain
