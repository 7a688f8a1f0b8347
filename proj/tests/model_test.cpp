// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "shardtrain/error.hpp"
#include "shardtrain/model.hpp"
#include "shardtrain/ops.hpp"
#include "shardtrain/tape.hpp"
#include "test_util.hpp"

namespace shardtrain {
namespace {

using testing::tiny_model;

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  return c.vocab_size * d + c.max_seq_len * d + c.n_layers * block + 2 * d + d * c.vocab_size;
}

TEST(ModelConfig, Gpt2SmallDimensions) {
  ModelConfig c = ModelConfig::gpt2_small();
  EXPECT_EQ(c.d_model, 768u);
  EXPECT_EQ(c.n_heads, 12u);
  EXPECT_EQ(c.d_head, 64u);
  EXPECT_EQ(c.d_ff, 3072u);
  EXPECT_EQ(c.n_layers, 12u);
  EXPECT_EQ(c.vocab_size, 50257u);
  EXPECT_EQ(c.max_seq_len, 1024u);
  EXPECT_NO_THROW(c.validate());
  // 124M-class model with an untied output projection.
  EXPECT_EQ(expected_parameter_count(c), 163037184u);
}

TEST(ModelConfig, ValidationRejectsInconsistentHeads) {
  ModelConfig c = tiny_model();
  c.d_head = 7;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny_model();
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(InitParams, OrderShapesAndCount) {
  ModelConfig c = tiny_model(3);
  ParameterSet ps = init_params(c);
  EXPECT_EQ(ps.size(), 2u + 12u * 3u + 3u);
  EXPECT_EQ(ps[0].name, "wte");
  EXPECT_EQ(ps[0].tensor.shape(), (Shape{c.vocab_size, c.d_model}));
  EXPECT_EQ(ps[1].name, "wpe");
  EXPECT_EQ(ps[2].name, "h0.ln_1.gain");
  EXPECT_EQ(ps.at("h1.attn.c_attn.weight").shape(), (Shape{c.d_model, 3 * c.d_model}));
  EXPECT_EQ(ps.at("h2.mlp.c_fc.weight").shape(), (Shape{c.d_model, c.d_ff}));
  EXPECT_EQ(ps[ps.size() - 1].name, "lm_head.weight");
  EXPECT_EQ(ps[ps.size() - 1].tensor.shape(), (Shape{c.d_model, c.vocab_size}));
  EXPECT_EQ(ps.total_parameter_count(), expected_parameter_count(c));
}

TEST(InitParams, GaussianWeightsAndDeterminism) {
  ModelConfig c = tiny_model();
  c.vocab_size = 400;
  ParameterSet a = init_params(c), b = init_params(c);
  auto w = a.at("wte").values();
  double mean = 0.0, sq = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(w.size()));
  EXPECT_NEAR(mean, 0.0, 0.002);
  EXPECT_NEAR(sd, 0.02, 0.002);
  for (double v : a.at("h0.ln_1.gain").values()) EXPECT_EQ(v, 1.0);
  for (double v : a.at("h0.attn.c_attn.bias").values()) EXPECT_EQ(v, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(testing::max_abs_diff(a[i].tensor.values(), b[i].tensor.values()), 0.0);
  }
  c.seed += 1;
  ParameterSet other = init_params(c);
  EXPECT_GT(testing::max_abs_diff(a[0].tensor.values(), other[0].tensor.values()), 0.0);
}

TEST(UnitPlan, CoversEveryParameterOnce) {
  ModelConfig c = tiny_model(3);
  auto plan = unit_plan(c);
  ASSERT_EQ(plan.size(), c.n_layers + 2);
  EXPECT_EQ(plan.front(), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(plan.back().size(), 3u);
  std::vector<int> seen(init_params(c).size(), 0);
  for (const auto& unit : plan) {
    for (std::size_t i : unit) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(ModelForward, LogitShapeAndUniformStart) {
  ModelConfig c = tiny_model();
  ParameterSet ps = init_params(c);
  TokenBatch b = testing::make_batch(3, 6, c.vocab_size, 1);
  LossResult r = model_loss(c, ps, b);
  EXPECT_EQ(r.logits.shape(), (Shape{18, c.vocab_size}));
  EXPECT_EQ(r.token_count, 18u);
  EXPECT_NEAR(r.mean_loss.item(), std::log(static_cast<double>(c.vocab_size)), 0.02 * std::log(29.0));
  EXPECT_NEAR(r.total_loss, r.mean_loss.item() * 18.0, 1e-12);
}

TEST(ModelForward, EarlierLogitsIgnoreLaterTokens) {
  ModelConfig c = tiny_model();
  ParameterSet ps = init_params(c);
  std::vector<TokenId> a = {1, 2, 3, 4, 5, 6};
  std::vector<TokenId> b = {1, 2, 3, 9, 9, 9};
  Tensor la = model_forward(c, ps, a);
  Tensor lb = model_forward(c, ps, b);
  for (std::size_t i = 0; i < 3 * c.vocab_size; ++i) EXPECT_EQ(la.values()[i], lb.values()[i]);
  EXPECT_NE(la.values()[3 * c.vocab_size], lb.values()[3 * c.vocab_size]);
}

TEST(ModelForward, BatchRowsAreIndependent) {
  ModelConfig c = tiny_model();
  ParameterSet ps = init_params(c);
  std::vector<TokenId> both = {1, 2, 3, 4, 7, 8, 9, 10};
  Tensor joint = model_forward(c, ps, both, 2, 4);
  Tensor second = model_forward(c, ps, std::vector<TokenId>{7, 8, 9, 10});
  for (std::size_t i = 0; i < 4 * c.vocab_size; ++i) {
    EXPECT_NEAR(joint.values()[4 * c.vocab_size + i], second.values()[i], 1e-13);
  }
}

TEST(ModelForward, ValidatesInputs) {
  ModelConfig c = tiny_model();
  ParameterSet ps = init_params(c);
  std::vector<TokenId> too_long(c.max_seq_len + 1, 1);
  EXPECT_THROW(model_forward(c, ps, too_long), ValidationError);
  std::vector<TokenId> bad_id = {1, static_cast<TokenId>(c.vocab_size)};
  EXPECT_THROW(model_forward(c, ps, bad_id), ValidationError);
  ParameterSet missing;
  EXPECT_THROW(model_forward(c, missing, std::vector<TokenId>{1}), ValidationError);
}

TEST(ModelForward, OrphanParameterIsReportedUnused) {
  ModelConfig c = tiny_model(1);
  ParameterSet ps = init_params(c);
  ps.add("orphan", Tensor::zeros({4}, true));
  TokenBatch b = testing::make_batch(1, 4, c.vocab_size, 2);
  Tape tape;
  TapeScope scope(tape);
  LossResult r = model_loss(c, ps, b);
  auto unused = count_unused_parameters(tape, r.mean_loss, ps);
  EXPECT_EQ(unused, (std::set<std::size_t>{ps.size() - 1}));
}

TEST(ModelForward, ObserverSeesEveryUnitInOrder) {
  struct Recorder : UnitObserver {
    std::vector<std::string> events;
    void before_unit(std::size_t u) override { events.push_back("b" + std::to_string(u)); }
    Tensor after_unit(std::size_t u, Tensor out) override {
      events.push_back("a" + std::to_string(u));
      return out;
    }
  } rec;
  ModelConfig c = tiny_model(2);
  ParameterSet ps = init_params(c);
  ForwardOptions opts;
  opts.observer = &rec;
  model_forward(c, ps, std::vector<TokenId>{1, 2, 3}, 1, 3, opts);
  EXPECT_EQ(rec.events, (std::vector<std::string>{"b0", "a0", "b1", "a1", "b2", "a2", "b3", "a3"}));
}

}  // namespace
}  // namespace shardtrain
