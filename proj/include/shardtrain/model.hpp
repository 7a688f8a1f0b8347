// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "shardtrain/ops.hpp"
#include "shardtrain/tape.hpp"
#include "shardtrain/tensor.hpp"

namespace shardtrain {

/// Shape of a GPT-2 style decoder. Defaults are the desk-scale model; the
/// published GPT-2 small configuration is available via gpt2_small().
struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t d_ff = 128;
  std::size_t n_layers = 2;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 64;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;

  /// d_model 768, 12 heads of 64, d_ff 3072, 12 layers, 50257 tokens.
  static ModelConfig gpt2_small();

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Ordered, uniquely named parameters. Order is deterministic for a given
/// config and defines bucket and unit layouts downstream.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);

  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }
  NamedParameter& operator[](std::size_t i) { return params_.at(i); }
  const NamedParameter& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t index_of(const std::string& name) const;
  const Tensor& at(const std::string& name) const { return params_[index_of(name)].tensor; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_parameter_count() const;
  std::vector<std::string> names() const;
  /// Independent tensors with equal values; grads and hooks are not copied.
  ParameterSet deep_copy() const;
  void zero_grad();
  /// Installs a GradAccumulator on every parameter, indexed by position.
  void attach_accumulators();

 private:
  std::vector<NamedParameter> params_;
};

/// Seeded N(0, 0.02²) weights, zero biases, unit layer-norm gains.
ParameterSet init_params(const ModelConfig& config);

/// Parameter indices grouped into sharding units: the embeddings, one unit
/// per decoder block, and the output head (final norm + projection).
std::vector<std::vector<std::size_t>> unit_plan(const ModelConfig& config);

/// Receives control around each unit's forward computation.
class UnitObserver {
 public:
  virtual ~UnitObserver() = default;
  virtual void before_unit(std::size_t unit) = 0;
  virtual Tensor after_unit(std::size_t unit, Tensor output) = 0;
};

struct ForwardOptions {
  UnitObserver* observer = nullptr;
  std::uint64_t dropout_seed = 0;
};

/// `batch` sequences of `seq_len` tokens, flattened row-major.
/// Targets are the next token at each position.
struct TokenBatch {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::size_t batch = 0;
  std::size_t seq_len = 0;

  std::size_t token_count() const noexcept { return inputs.size(); }
};

/// Embeddings, pre-norm decoder blocks, final norm, vocabulary projection.
/// Returns logits of shape [batch·seq_len × vocab].
Tensor model_forward(const ModelConfig& config, const ParameterSet& params, std::span<const TokenId> tokens,
                     std::size_t batch, std::size_t seq_len, const ForwardOptions& options = {});

/// Single-sequence convenience overload.
Tensor model_forward(const ModelConfig& config, const ParameterSet& params, std::span<const TokenId> tokens);

struct LossResult {
  Tensor logits;
  Tensor mean_loss;     // total / token_count, differentiable
  double total_loss = 0.0;
  std::size_t token_count = 0;
};

LossResult model_loss(const ModelConfig& config, const ParameterSet& params, const TokenBatch& batch,
                      const ForwardOptions& options = {});

/// Indices of parameters with no path to `root` on `tape`, at whole-tensor
/// granularity.
std::set<std::size_t> count_unused_parameters(const Tape& tape, const Tensor& root, const ParameterSet& params);

/// Same, taking the most recently recorded node as the output.
std::set<std::size_t> count_unused_parameters(const Tape& tape, const ParameterSet& params);

}  // namespace shardtrain
