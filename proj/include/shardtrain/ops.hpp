// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "shardtrain/tensor.hpp"

namespace shardtrain {

using TokenId = std::uint32_t;

// Differentiable operations. Each records itself on the thread's active tape
// when any input is tracked; without an active tape they are plain math.

/// [m×k]·[k×n] -> [m×n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise sum of equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);

/// Adds a length-d bias to every row of a [...×d] tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// Elementwise product of equally shaped tensors.
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);

/// Sum of all elements as a [1] tensor.
Tensor sum(const Tensor& x);

/// Row-wise softmax of a [m×n] tensor with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalises over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// x·Φ(x) with the exact Gaussian CDF, Φ(x) = (1 + erf(x/√2)) / 2.
Tensor gelu(const Tensor& x);

/// Gathers rows of a [V×d] table; gradients scatter-add back.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

/// Inverted dropout with a counter-based mask derived from `seed`.
/// A rate of 0 returns the input unchanged.
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed);

struct CrossEntropy {
  Tensor total_loss;  // Σₜ −log softmax(logits[t])[targets[t]], shape [1]
  std::size_t token_count = 0;
};

/// Summed next-token cross entropy over the rows of a [T×V] logits tensor.
CrossEntropy cross_entropy_next_token(const Tensor& logits, std::span<const TokenId> targets);

/// Single-head inputs of scaled dot-product attention; d_k is Q's width.
struct AttentionInputs {
  Tensor q;  // [T×d_k]
  Tensor k;  // [T×d_k]
  Tensor v;  // [T×d_v]
};

/// softmax(QKᵀ/√d_k + causal mask)·V. Row t attends to positions ≤ t only.
Tensor causal_attention(const AttentionInputs& inputs);

/// Multi-head causal attention over a fused [B·T × 3d] projection laid out as
/// [Q | K | V], each split into `n_heads` contiguous column blocks. Returns the
/// concatenated head outputs, [B·T × d].
Tensor multi_head_causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq_len,
                                   std::size_t n_heads);

/// Identity whose backward first invokes `before_backward`. Used to run
/// work (re-materialising sharded parameters) just before the gradients of
/// everything upstream of `x` are computed.
Tensor with_backward_hook(const Tensor& x, std::function<void()> before_backward);

}  // namespace shardtrain
