// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "shardtrain/error.hpp"
#include "shardtrain/gradcheck.hpp"
#include "shardtrain/ops.hpp"
#include "shardtrain/tape.hpp"
#include "test_util.hpp"

namespace shardtrain {
namespace {

using testing::random_tensor;

TEST(Tape, BackwardWithoutTapeIsStateError) {
  Tensor x = Tensor::scalar(1.0, true);
  EXPECT_THROW(backward(x), StateError);
}

TEST(Tape, SecondBackwardIsStateError) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(mul(x, x));
  tape.backward(y);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_THROW(tape.backward(y), StateError);
}

TEST(Tape, NonScalarRootIsStateError) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), StateError);
}

TEST(Tape, UntrackedInputsRecordNothing) {
  Tensor x = Tensor::from({2}, {1.0, 2.0});
  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, SharedLeafAccumulatesAcrossUses) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(add(mul(x, x), scale(x, 5.0)));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * 3.0 + 5.0);
}

TEST(Tape, PostHooksFireOnceAfterAccumulationInReverseUseOrder) {
  Tensor a = Tensor::from({1}, {2.0}, true);
  Tensor b = Tensor::from({1}, {3.0}, true);
  a.ensure_accumulator(0);
  b.ensure_accumulator(1);
  std::vector<std::size_t> fired;
  std::vector<double> seen;
  auto hook = [&](std::size_t idx) {
    fired.push_back(idx);
    seen.push_back(idx == 0 ? a.grad()[0] : b.grad()[0]);
  };
  a.add_post_hook(hook);
  b.add_post_hook(hook);
  Tape tape;
  TapeScope scope(tape);
  // a is used twice, first before b.
  Tensor y = sum(mul(add(a, a), b));
  tape.backward(y);
  ASSERT_EQ(fired.size(), 2u);
  EXPECT_EQ(fired[0], 1u);
  EXPECT_EQ(fired[1], 0u);
  EXPECT_DOUBLE_EQ(seen[0], 4.0);
  EXPECT_DOUBLE_EQ(seen[1], 6.0);
}

TEST(Ops, SoftmaxRowsSumToOneAndIgnoreShift) {
  Tensor x = random_tensor({3, 7}, 1, false);
  Tensor shifted = x.clone();
  for (double& v : shifted.mutable_values()) v += 100.0;
  Tensor p = softmax_rows(x);
  Tensor q = softmax_rows(shifted);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += p.values()[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  EXPECT_LE(testing::max_abs_diff(p.values(), q.values()), 1e-14);
}

TEST(Ops, LayerNormNormalizesRows) {
  Tensor x = random_tensor({4, 9}, 2, false);
  Tensor g = Tensor::from({9}, std::vector<double>(9, 1.0));
  Tensor b = Tensor::zeros({9});
  Tensor y = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 9; ++c) mean += y.values()[r * 9 + c];
    mean /= 9.0;
    for (std::size_t c = 0; c < 9; ++c) var += std::pow(y.values()[r * 9 + c] - mean, 2);
    var /= 9.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(Ops, GeluUsesExactErf) {
  Tensor x = Tensor::from({3}, {0.0, 1.0, -2.0});
  Tensor y = gelu(x);
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_NEAR(y.values()[1], 0.5 * (1.0 + std::erf(1.0 / std::numbers::sqrt2)), 1e-15);
  EXPECT_NEAR(y.values()[2], -2.0 * 0.5 * (1.0 + std::erf(-2.0 / std::numbers::sqrt2)), 1e-15);
}

TEST(Ops, MatmulMatchesHandProduct) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_THROW(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST(Ops, UniformLogitsGiveLogVocabPerToken) {
  Tensor logits = Tensor::zeros({5, 13});
  const std::vector<TokenId> targets = {0, 3, 12, 7, 7};
  CrossEntropy ce = cross_entropy_next_token(logits, targets);
  EXPECT_EQ(ce.token_count, 5u);
  EXPECT_NEAR(ce.total_loss.item() / 5.0, std::log(13.0), 1e-15);
  const std::vector<TokenId> bad = {0, 3, 13, 7, 7};
  EXPECT_THROW(cross_entropy_next_token(logits, bad), ValidationError);
}

TEST(Ops, CausalAttentionIgnoresFuturePositions) {
  Tensor q = random_tensor({5, 4}, 3, false);
  Tensor k = random_tensor({5, 4}, 4, false);
  Tensor v = random_tensor({5, 4}, 5, false);
  Tensor base = causal_attention({q, k, v});
  Tensor k2 = k.clone(), v2 = v.clone();
  for (std::size_t c = 0; c < 4; ++c) {
    k2.mutable_values()[4 * 4 + c] += 10.0;
    v2.mutable_values()[4 * 4 + c] -= 10.0;
  }
  Tensor changed = causal_attention({q, k2, v2});
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(base.values()[i], changed.values()[i]);
  // First row attends only to itself.
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(base.values()[c], v.values()[c], 1e-15);
}

TEST(Ops, DropoutZeroRateIsIdentityAndMaskIsSeeded) {
  Tensor x = random_tensor({4, 4}, 6, false);
  EXPECT_TRUE(dropout(x, 0.0, 1).same_as(x));
  Tensor a = dropout(x, 0.5, 9), b = dropout(x, 0.5, 9);
  EXPECT_EQ(testing::max_abs_diff(a.values(), b.values()), 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    const double y = a.values()[i];
    EXPECT_TRUE(y == 0.0 || std::abs(y - 2.0 * x.values()[i]) < 1e-15);
  }
}

TEST(Ops, EmbeddingRejectsOutOfRangeIds) {
  Tensor table = random_tensor({4, 3}, 7, false);
  const std::vector<TokenId> ids = {1, 4};
  EXPECT_THROW(embedding(table, ids), ValidationError);
}

TEST(Ops, BackwardHookRunsBeforeUpstreamGradients) {
  Tensor x = Tensor::from({2}, {1.0, -1.0}, true);
  x.ensure_accumulator(0);
  std::vector<std::string> order;
  x.add_post_hook([&](std::size_t) { order.push_back("leaf"); });
  Tape tape;
  TapeScope scope(tape);
  Tensor y = sum(with_backward_hook(scale(x, 3.0), [&] { order.push_back("hook"); }));
  tape.backward(y);
  EXPECT_EQ(order, (std::vector<std::string>{"hook", "leaf"}));
  EXPECT_EQ(x.grad()[0], 3.0);
}

// Random shapes through a chain of ops, checked against finite differences.
class GradcheckProperty : public ::testing::TestWithParam<int> {};

TEST_P(GradcheckProperty, ComposedOpsMatchFiniteDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  const std::size_t m = ext(rng), k = ext(rng), n = ext(rng) + 1;
  Tensor a = random_tensor({m, k}, seed * 10 + 1);
  Tensor b = random_tensor({k, n}, seed * 10 + 2);
  Tensor g = random_tensor({n}, seed * 10 + 3);
  Tensor bias = random_tensor({n}, seed * 10 + 4);
  std::vector<TokenId> targets;
  for (std::size_t i = 0; i < m; ++i) targets.push_back(static_cast<TokenId>(rng() % n));
  auto f = [targets](std::span<const Tensor> in) {
    Tensor h = gelu(layer_norm(matmul(in[0], in[1]), in[2], in[3]));
    return cross_entropy_next_token(add(softmax_rows(h), h), targets).total_loss;
  };
  GradcheckResult r = gradcheck(f, {a, b, g, bias});
  EXPECT_TRUE(r.passed) << "max rel error " << r.max_rel_error;
  EXPECT_LE(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, GradcheckProperty, ::testing::Range(0, 12));

TEST(Gradcheck, DetectsAWrongGradient) {
  // A deliberately broken op: forward doubles, backward claims the identity.
  auto broken = [](std::span<const Tensor> in) {
    Tensor out = Tensor::from(in[0].shape(), {2.0 * in[0].values()[0]});
    if (Tape::current() == nullptr) return out;
    Tensor inputs[] = {in[0]};
    Tensor y = Tape::current()->record("broken", inputs, out, [](std::span<const double> g, BackwardContext& ctx) {
      if (ctx.needs(0)) ctx.grad(0)[0] += g[0];
    });
    return y;
  };
  GradcheckResult r = gradcheck(broken, {Tensor::from({1}, {0.5}, true)});
  EXPECT_FALSE(r.passed);
}

}  // namespace
}  // namespace shardtrain
