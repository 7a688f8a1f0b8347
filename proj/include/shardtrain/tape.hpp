// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shardtrain/tensor.hpp"

namespace shardtrain {

class Tape;

/// Gives a node's backward function access to its inputs' gradient buffers.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  /// True when input `slot` is tracked and therefore wants a gradient.
  bool needs(std::size_t slot) const;
  /// Gradient buffer of input `slot`, zero-initialised on first access.
  std::span<double> grad(std::size_t slot);

 private:
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, BackwardContext& ctx)>;

inline constexpr std::size_t kUntracked = std::numeric_limits<std::size_t>::max();

struct TapeNode {
  std::string op;
  std::vector<std::size_t> inputs;  // kUntracked for constant inputs
  Tensor output;
  BackwardFn backward;  // empty for leaves
  bool is_leaf = false;
};

/// Append-only record of one forward pass. Nodes are appended in execution
/// order, so every node's inputs precede it and reverse append order is a
/// valid reverse topological order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape made active on this thread by a TapeScope, or nullptr.
  static Tape* current();

  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(std::size_t index) const { return nodes_.at(index); }

  /// Node index for `t` on this tape. Tensors that require grad but are not
  /// yet on the tape are registered as leaves.
  std::optional<std::size_t> track(const Tensor& t);

  /// Appends an op node when at least one input is tracked and returns the
  /// output tensor, now bound to the new node. Otherwise returns `output`
  /// untouched.
  Tensor record(std::string_view op, std::span<const Tensor> inputs, Tensor output, BackwardFn backward);

  /// Reverse-mode sweep from a scalar root. Leaf gradients are accumulated
  /// into their tensors and post-hooks fire as each leaf is finalised.
  void backward(const Tensor& root);

  bool consumed() const noexcept { return consumed_; }

  /// Indices of nodes from which `root` is reachable.
  std::vector<bool> reaches(std::size_t root) const;
  std::optional<std::size_t> index_of(const Tensor& t) const;

  /// Payload bytes of all non-leaf outputs recorded so far.
  std::size_t activation_bytes() const noexcept { return activation_bytes_; }

  /// Number of leaves whose post-hooks fired during the last backward.
  std::size_t hooked_leaf_count() const noexcept { return hooked_leaves_; }

 private:
  friend class BackwardContext;

  std::uint64_t id_;
  std::vector<TapeNode> nodes_;
  std::vector<std::vector<double>> grads_;
  std::size_t activation_bytes_ = 0;
  std::size_t hooked_leaves_ = 0;
  bool consumed_ = false;
};

/// Makes a tape current on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Runs backward on the current thread's active tape.
void backward(const Tensor& root);

}  // namespace shardtrain
