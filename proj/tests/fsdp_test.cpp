// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "shardtrain/ddp.hpp"
#include "shardtrain/error.hpp"
#include "shardtrain/fsdp.hpp"
#include "shardtrain/tape.hpp"
#include "test_util.hpp"

namespace shardtrain {
namespace {

using testing::run_ranks;
using testing::tiny_model;

TEST(FsdpPlan, PadsToWorldMultiple) {
  ParameterSet ps;
  std::vector<double> v(10);
  for (std::size_t i = 0; i < 10; ++i) v[i] = static_cast<double>(i);
  ps.add("w", Tensor::from({2, 5}, v));
  auto units = plan_fsdp_units(ps, {{0}}, 4);
  ASSERT_EQ(units.size(), 1u);
  EXPECT_EQ(units[0].flat_full_len, 12u);
  EXPECT_EQ(units[0].shard_len, 3u);
  auto flat = flatten_unit(units[0], ps);
  EXPECT_EQ(std::vector<double>(flat.begin() + 9, flat.end()), (std::vector<double>{9, 0, 0}));
  EXPECT_EQ(units[0].valid_in_shard(3), 1u);
  EXPECT_EQ(units[0].valid_in_shard(0), 3u);

  auto single = plan_fsdp_units(ps, {{0}}, 1);
  EXPECT_EQ(single[0].flat_full_len, 10u);
  EXPECT_EQ(single[0].shard_len, 10u);
}

TEST(FsdpPlan, RejectsEmptyOrOverlappingUnits) {
  ParameterSet ps;
  ps.add("a", Tensor::zeros({2}));
  ps.add("b", Tensor::zeros({2}));
  EXPECT_THROW(plan_fsdp_units(ps, {{0}, {}}, 2), ValidationError);
  EXPECT_THROW(plan_fsdp_units(ps, {{0, 1}, {1}}, 2), ValidationError);
}

TEST(Fsdp, ShardsReassembleToTheOriginal) {
  ModelConfig c = tiny_model();
  const ParameterSet original = init_params(c);
  for (int w : {1, 2, 3}) {
    WorkerGroup g(w);
    std::vector<std::vector<std::vector<double>>> shards(static_cast<std::size_t>(w));
    std::vector<FsdpUnit> units;
    std::vector<ParameterSet> gathered(static_cast<std::size_t>(w));
    run_ranks(g, [&](int r, Communicator& comm) {
      FullyShardedDataParallel f(c, init_params(c), comm);
      for (const auto& p : f.parameters()) EXPECT_FALSE(p.tensor.resident());
      for (const auto& s : f.shards()) shards[static_cast<std::size_t>(r)].push_back(s.params);
      if (r == 0) units = f.units();
      gathered[static_cast<std::size_t>(r)] = f.gather_full_parameters();
    });
    for (std::size_t u = 0; u < units.size(); ++u) {
      std::vector<double> flat;
      for (int r = 0; r < w; ++r) {
        const auto& s = shards[static_cast<std::size_t>(r)][u];
        flat.insert(flat.end(), s.begin(), s.end());
      }
      for (const auto& slot : units[u].slots) {
        auto ref = original[slot.parameter_index].tensor.values();
        EXPECT_TRUE(std::equal(ref.begin(), ref.end(), flat.begin() + static_cast<std::ptrdiff_t>(slot.offset)));
      }
      for (std::size_t i = units[u].unpadded_len; i < flat.size(); ++i) EXPECT_EQ(flat[i], 0.0);
    }
    for (std::size_t i = 0; i < original.size(); ++i) {
      for (int r = 0; r < w; ++r) {
        EXPECT_EQ(testing::max_abs_diff(gathered[static_cast<std::size_t>(r)][i].tensor.values(),
                                        original[i].tensor.values()),
                  0.0);
      }
    }
  }
}

TEST(Fsdp, ShardGradientsMatchDdpReducedGradients) {
  ModelConfig c = tiny_model();
  WorkerGroup gd(2), gf(2);
  std::vector<TokenBatch> batches = {testing::make_batch(2, 6, c.vocab_size, 21),
                                     testing::make_batch(2, 6, c.vocab_size, 22)};
  // Full summed gradient per parameter from DDP's buckets.
  std::vector<std::vector<double>> ddp_grads;
  run_ranks(gd, [&](int r, Communicator& comm) {
    DistributedDataParallel d(c, init_params(c), comm, 500);
    d.forward(batches[static_cast<std::size_t>(r)]);
    d.backward();
    if (r == 0) {
      for (std::size_t i = 0; i < d.parameters().size(); ++i) {
        auto [b, off] = d.location(i);
        const auto& buf = d.buckets()[b].buffer;
        ddp_grads.emplace_back(buf.begin() + static_cast<std::ptrdiff_t>(off),
                               buf.begin() + static_cast<std::ptrdiff_t>(off + d.parameters()[i].tensor.numel()));
      }
    }
  });
  std::vector<std::vector<double>> fsdp_flat;
  std::vector<FsdpUnit> units;
  run_ranks(gf, [&](int r, Communicator& comm) {
    FullyShardedDataParallel f(c, init_params(c), comm);
    f.forward(batches[static_cast<std::size_t>(r)]);
    f.backward();
    for (const auto& p : f.parameters()) {
      EXPECT_FALSE(p.tensor.resident());
      EXPECT_FALSE(p.tensor.has_grad());
    }
    for (std::size_t u = 0; u < f.units().size(); ++u) {
      const auto& s = f.shards()[u];
      for (std::size_t i = f.units()[u].valid_in_shard(r); i < s.grads.size(); ++i) EXPECT_EQ(s.grads[i], 0.0);
      auto full = comm.all_gather(s.grads);
      if (r == 0) fsdp_flat.push_back(std::move(full));
    }
    if (r == 0) units = f.units();
  });
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (const auto& slot : units[u].slots) {
      std::span<const double> got(fsdp_flat[u].data() + slot.offset, slot.numel);
      EXPECT_LE(testing::max_abs_diff(got, ddp_grads[slot.parameter_index]), 1e-12);
    }
  }
}

TEST(Fsdp, SgdStepUpdatesShardByAverageGradient) {
  ModelConfig c = tiny_model();
  WorkerGroup g(2);
  std::vector<std::vector<double>> shard_after(2);
  run_ranks(g, [&](int r, Communicator& comm) {
    FullyShardedDataParallel f(c, init_params(c), comm);
    TokenBatch b = testing::make_batch(1, 4, c.vocab_size, 5 + static_cast<std::uint64_t>(r));
    f.forward(b);
    f.backward();
    std::vector<double> grads = f.shards()[1].grads;
    std::vector<double> before = f.shards()[1].params;
    auto norm = f.step(0.1);
    ASSERT_TRUE(norm.has_value());
    const auto& after = f.shards()[1].params;
    for (std::size_t i = 0; i < f.units()[1].valid_in_shard(r); ++i) {
      EXPECT_DOUBLE_EQ(after[i], before[i] - 0.1 * grads[i] / 2.0);
    }
    for (double gval : f.shards()[1].grads) EXPECT_EQ(gval, 0.0);
  });
}

TEST(Fsdp, LifecycleErrors) {
  ModelConfig c = tiny_model();
  WorkerGroup g(1);
  FullyShardedDataParallel f(c, init_params(c), g.communicator(0));
  EXPECT_THROW(f.backward(), StateError);
  EXPECT_THROW(f.unit_backward_reduce(0), StateError);
  EXPECT_FALSE(f.step(0.1).has_value());
  EXPECT_THROW(FullyShardedDataParallel(c, init_params(c), g.communicator(0), {}, 0), ValidationError);
}

TEST(Fsdp, AccumulationStepsEveryKMicroBatches) {
  ModelConfig c = tiny_model();
  WorkerGroup g(1);
  FullyShardedDataParallel f(c, init_params(c), g.communicator(0), {}, 2);
  f.forward(testing::make_batch(1, 4, c.vocab_size, 1));
  f.backward();
  EXPECT_FALSE(f.step(0.1).has_value());
  f.forward(testing::make_batch(1, 4, c.vocab_size, 2));
  f.backward();
  EXPECT_TRUE(f.step(0.1).has_value());
  EXPECT_EQ(f.accumulation().micro_step, 2u);
}

TEST(Fsdp, CollectivePatternPerStep) {
  ModelConfig c = tiny_model();
  WorkerGroup g(2);
  std::size_t units = 0;
  run_ranks(g, [&](int, Communicator& comm) {
    FullyShardedDataParallel f(c, init_params(c), comm);
    units = f.units().size();
    const std::size_t before = comm.records().size();
    f.forward(testing::make_batch(1, 4, c.vocab_size, 9));
    f.backward();
    f.step(0.1);
    std::size_t gathers = 0, scatters = 0, reduces = 0;
    for (std::size_t i = before; i < comm.records().size(); ++i) {
      switch (comm.records()[i].op) {
        case CollectiveOp::kAllGather: ++gathers; break;
        case CollectiveOp::kReduceScatter: ++scatters; break;
        case CollectiveOp::kAllReduceSum: ++reduces; break;
        default: break;
      }
    }
    EXPECT_EQ(gathers, 2 * f.units().size());
    EXPECT_EQ(scatters, f.units().size());
    EXPECT_EQ(reduces, 1u);
  });
  EXPECT_EQ(units, c.n_layers + 2);
}

TEST(Fsdp, LedgerPeakIsShardsPlusOneFullUnit) {
  ModelConfig c = tiny_model(3);
  WorkerGroup g(2);
  std::vector<MemoryLedger> ledgers(2);
  run_ranks(g, [&](int r, Communicator& comm) {
    OptimizerConfig adam;
    adam.kind = OptimizerKind::kAdam;
    MemoryLedger& ledger = ledgers[static_cast<std::size_t>(r)];
    FullyShardedDataParallel f(c, init_params(c), comm, adam, 1, &ledger);
    std::size_t shard_total = 0, largest = 0;
    for (const auto& u : f.units()) {
      shard_total += u.shard_len;
      largest = std::max(largest, u.flat_full_len);
    }
    EXPECT_EQ(f.optimizer().state_size(), shard_total);
    EXPECT_EQ(ledger.live(MemoryTag::kOptimizerState), 2 * shard_total * sizeof(double));
    f.forward(testing::make_batch(2, 6, c.vocab_size, 3));
    f.backward();
    f.step(0.01);
    const std::size_t persistent = 4 * shard_total * sizeof(double);
    EXPECT_EQ(ledger.current(), persistent);
    EXPECT_EQ(ledger.peak(), persistent + 2 * largest * sizeof(double));
    EXPECT_EQ(ledger.transient_live(), 0u);
  });
}

}  // namespace
}  // namespace shardtrain
