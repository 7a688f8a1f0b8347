// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "shardtrain/model.hpp"

namespace shardtrain {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Reverse-mode gradients of every differentiable op and a small model loss
/// against central differences.
std::vector<CheckResult> gradient_checks();
/// Collective results against serial sums for several world sizes.
std::vector<CheckResult> collective_checks();
/// Final parameters of ddp and fsdp against the single-worker loop.
std::vector<CheckResult> equivalence_checks();

/// Largest elementwise difference; infinity if names or shapes differ.
double max_abs_difference(const ParameterSet& a, const ParameterSet& b);

/// Runs all checks, printing one line each. Returns true if all passed.
bool run_selftest(std::ostream& out);

}  // namespace shardtrain
