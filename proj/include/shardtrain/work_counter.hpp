// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace shardtrain {

/// Per-thread tally of compute and communication work. Feeds the simulated
/// clock, which turns counted work into a deterministic duration.
struct WorkCounts {
  std::uint64_t flops = 0;
  std::uint64_t comm_bytes = 0;
  std::uint64_t collective_calls = 0;

  WorkCounts operator-(const WorkCounts& base) const {
    return {flops - base.flops, comm_bytes - base.comm_bytes, collective_calls - base.collective_calls};
  }
};

WorkCounts& thread_work_counts();

inline void count_flops(std::uint64_t n) { thread_work_counts().flops += n; }

/// Cost model of one simulated worker.
struct SimulatedDevice {
  double flops_per_second = 1.0e9;
  double bytes_per_second = 1.0e9;
  double seconds_per_collective = 1.0e-5;

  double seconds(const WorkCounts& w) const {
    return static_cast<double>(w.flops) / flops_per_second +
           static_cast<double>(w.comm_bytes) / bytes_per_second +
           static_cast<double>(w.collective_calls) * seconds_per_collective;
  }
};

}  // namespace shardtrain
