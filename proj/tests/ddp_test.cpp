// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "shardtrain/ddp.hpp"
#include "shardtrain/error.hpp"
#include "shardtrain/tape.hpp"
#include "test_util.hpp"

namespace shardtrain {
namespace {

using testing::run_ranks;
using testing::tiny_model;

std::vector<std::vector<std::size_t>> bucket_members(const std::vector<BucketLayout>& layouts) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& b : layouts) {
    out.emplace_back();
    for (const auto& v : b.views) out.back().push_back(v.parameter_index);
  }
  return out;
}

TEST(Buckets, GreedyReverseOrder) {
  const std::size_t sizes[] = {10, 20, 30};
  auto b = allocate_buckets(sizes, 50);
  EXPECT_EQ(bucket_members(b), (std::vector<std::vector<std::size_t>>{{2, 1}, {0}}));
  EXPECT_EQ(b[0].views[1].offset, 30u);
  EXPECT_EQ(b[0].size, 50u);
}

TEST(Buckets, OversizedParameterGetsItsOwnBucket) {
  const std::size_t sizes[] = {5, 100, 5};
  auto b = allocate_buckets(sizes, 20);
  EXPECT_EQ(bucket_members(b), (std::vector<std::vector<std::size_t>>{{2}, {1}, {0}}));
  EXPECT_EQ(b[1].size, 100u);
}

TEST(Buckets, CapLargerThanModelGivesOneBucket) {
  const std::size_t sizes[] = {1, 2, 3};
  auto b = allocate_buckets(sizes, 1000);
  EXPECT_EQ(bucket_members(b), (std::vector<std::vector<std::size_t>>{{2, 1, 0}}));
  EXPECT_THROW(allocate_buckets(sizes, 0), ValidationError);
}

TEST(Buckets, DeskModelSplitsIntoSeveralBuckets) {
  ParameterSet ps = init_params(ModelConfig{});
  std::vector<std::size_t> sizes;
  for (const auto& p : ps) sizes.push_back(p.tensor.numel());
  EXPECT_GE(allocate_buckets(sizes, kDefaultBucketCap).size(), 3u);
}

struct DdpFixture {
  ModelConfig config = tiny_model();
  std::size_t cap = 600;
};

TEST(Ddp, ReplicasAgreeAndMatchFullBatchGradient) {
  DdpFixture f;
  WorkerGroup g(2);
  TokenBatch full = testing::make_batch(4, 6, f.config.vocab_size, 3);
  auto half = [&](int r) {
    TokenBatch b;
    b.batch = 2;
    b.seq_len = 6;
    b.inputs.assign(full.inputs.begin() + r * 12, full.inputs.begin() + (r + 1) * 12);
    b.targets.assign(full.targets.begin() + r * 12, full.targets.begin() + (r + 1) * 12);
    return b;
  };

  // Reference: one SGD step on the full batch.
  ParameterSet ref = init_params(f.config);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(model_loss(f.config, ref, full).mean_loss);
  }
  for (auto& p : ref) {
    auto v = p.tensor.mutable_values();
    auto gr = p.tensor.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * gr[i];
  }

  std::vector<ParameterSet> after(2);
  std::vector<std::vector<std::size_t>> orders(2);
  run_ranks(g, [&](int r, Communicator& c) {
    ParameterSet mine = init_params(f.config);
    if (r == 1) {
      for (auto& p : mine) {
        for (double& v : p.tensor.mutable_values()) v += 1.0;  // broadcast must overwrite
      }
    }
    DistributedDataParallel ddp(f.config, std::move(mine), c, f.cap);
    EXPECT_GE(ddp.buckets().size(), 3u);
    ddp.forward(half(r));
    EXPECT_FALSE(ddp.reduction_complete());
    ddp.backward();
    EXPECT_TRUE(ddp.reduction_complete());
    orders[static_cast<std::size_t>(r)] = ddp.launch_order();
    ddp.step(0.1);
    after[static_cast<std::size_t>(r)] = ddp.parameters().deep_copy();
  });
  for (std::size_t b = 0; b < orders[0].size(); ++b) EXPECT_EQ(orders[0][b], b);
  EXPECT_EQ(orders[0], orders[1]);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(testing::max_abs_diff(after[0][i].tensor.values(), after[1][i].tensor.values()), 0.0);
    EXPECT_LE(testing::max_abs_diff(after[0][i].tensor.values(), ref[i].tensor.values()), 1e-12);
  }
}

TEST(Ddp, LifecycleErrors) {
  DdpFixture f;
  WorkerGroup g(1);
  DistributedDataParallel ddp(f.config, init_params(f.config), g.communicator(0), f.cap);
  EXPECT_THROW(ddp.backward(), StateError);
  EXPECT_THROW(ddp.step(0.1), StateError);
  ddp.forward(testing::make_batch(1, 4, f.config.vocab_size, 1));
  ddp.backward();
  ddp.step(0.1);
  EXPECT_THROW(ddp.step(0.1), StateError);
}

TEST(Ddp, HookOnAlreadyReadyParameterIsInvariantError) {
  DdpFixture f;
  WorkerGroup g(1);
  DistributedDataParallel ddp(f.config, init_params(f.config), g.communicator(0), f.cap);
  ddp.prepare_for_backward({});
  ddp.autograd_hook(0);
  EXPECT_THROW(ddp.autograd_hook(0), InvariantError);
}

TEST(Ddp, UnusedParameterDoesNotStallReduction) {
  DdpFixture f;
  WorkerGroup g(2);
  run_ranks(g, [&](int r, Communicator& c) {
    ParameterSet ps = init_params(f.config);
    ps.add("orphan", Tensor::from({3}, {1.0, 2.0, 3.0}, true));
    DistributedDataParallel ddp(f.config, std::move(ps), c, f.cap);
    auto out = ddp.forward(testing::make_batch(1, 4, f.config.vocab_size, 10 + static_cast<std::uint64_t>(r)));
    EXPECT_EQ(out.unused.size(), 1u);
    ddp.backward();
    EXPECT_TRUE(ddp.reduction_complete());
    ddp.step(0.5);
    const Tensor& orphan = ddp.parameters().at("orphan");
    EXPECT_EQ(orphan.values()[2], 3.0);
  });
}

TEST(Ddp, LedgerHoldsFullReplicaAndBuckets) {
  DdpFixture f;
  WorkerGroup g(1);
  MemoryLedger ledger;
  OptimizerConfig adam;
  adam.kind = OptimizerKind::kAdam;
  DistributedDataParallel ddp(f.config, init_params(f.config), g.communicator(0), f.cap, adam, &ledger);
  const std::size_t p = init_params(f.config).total_parameter_count() * sizeof(double);
  EXPECT_EQ(ledger.live(MemoryTag::kParameter), p);
  EXPECT_EQ(ledger.live(MemoryTag::kGradient), p);
  EXPECT_EQ(ledger.live(MemoryTag::kBucket), p);
  EXPECT_EQ(ledger.live(MemoryTag::kOptimizerState), 2 * p);
  ddp.forward(testing::make_batch(1, 4, f.config.vocab_size, 1));
  ddp.backward();
  EXPECT_EQ(ledger.transient_live(), 0u);
  EXPECT_EQ(ledger.peak(), 5 * p);
}

}  // namespace
}  // namespace shardtrain
