// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/work_counter.hpp"

namespace shardtrain {

WorkCounts& thread_work_counts() {
  thread_local WorkCounts counts;
  return counts;
}

}  // namespace shardtrain
