// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/tape.hpp"

#include <atomic>

#include "shardtrain/error.hpp"

namespace shardtrain {
namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* active_tape = nullptr;

}  // namespace

bool BackwardContext::needs(std::size_t slot) const {
  return tape_.nodes_[node_].inputs.at(slot) != kUntracked;
}

std::span<double> BackwardContext::grad(std::size_t slot) {
  std::size_t input = tape_.nodes_[node_].inputs.at(slot);
  if (input == kUntracked) throw InvariantError("gradient requested for untracked input");
  auto& g = tape_.grads_[input];
  if (g.empty()) g.assign(tape_.nodes_[input].output.numel(), 0.0);
  return g;
}

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}
Tape::~Tape() = default;

Tape* Tape::current() { return active_tape; }

std::optional<std::size_t> Tape::index_of(const Tensor& t) const {
  const auto& ref = t.node();
  if (ref && ref->tape_id == id_) return ref->index;
  return std::nullopt;
}

std::optional<std::size_t> Tape::track(const Tensor& t) {
  if (auto idx = index_of(t)) return idx;
  if (!t.requires_grad()) return std::nullopt;
  std::size_t index = nodes_.size();
  TapeNode leaf;
  leaf.op = "leaf";
  leaf.output = t;
  leaf.is_leaf = true;
  nodes_.push_back(std::move(leaf));
  grads_.emplace_back();
  Tensor handle = t;
  handle.set_node({id_, index});
  return index;
}

Tensor Tape::record(std::string_view op, std::span<const Tensor> inputs, Tensor output, BackwardFn backward) {
  if (consumed_) throw StateError("recording onto a tape after backward");
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  bool any = false;
  for (const Tensor& in : inputs) {
    auto idx = track(in);
    ids.push_back(idx.value_or(kUntracked));
    any = any || idx.has_value();
  }
  if (!any) return output;
  std::size_t index = nodes_.size();
  activation_bytes_ += output.numel() * sizeof(double);
  output.set_requires_grad(true);
  output.set_node({id_, index});
  nodes_.push_back(TapeNode{std::string(op), std::move(ids), output, std::move(backward), false});
  grads_.emplace_back();
  return output;
}

std::vector<bool> Tape::reaches(std::size_t root) const {
  std::vector<bool> mark(nodes_.size(), false);
  if (root >= nodes_.size()) return mark;
  mark[root] = true;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!mark[i]) continue;
    for (std::size_t in : nodes_[i].inputs) {
      if (in != kUntracked) mark[in] = true;
    }
  }
  return mark;
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw StateError("backward called twice on the same tape");
  auto root_index = index_of(root);
  if (!root_index) throw StateError("backward root was not produced on this tape");
  if (root.numel() != 1) throw StateError("backward root must be a scalar, got " + shape_to_string(root.shape()));
  consumed_ = true;
  hooked_leaves_ = 0;
  grads_[*root_index].assign(1, 1.0);

  for (std::size_t i = *root_index + 1; i-- > 0;) {
    if (grads_[i].empty()) continue;
    TapeNode& n = nodes_[i];
    std::vector<double> g = std::move(grads_[i]);
    grads_[i].clear();
    if (n.is_leaf) {
      n.output.accumulate_grad(g);
      if (const GradAccumulator* acc = n.output.accumulator()) {
        ++hooked_leaves_;
        // Copy: a hook may register further hooks on the same accumulator.
        auto hooks = acc->post_hooks;
        for (auto& hook : hooks) hook(acc->parameter_index);
      }
      continue;
    }
    BackwardContext ctx(*this, i);
    n.backward(g, ctx);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }
TapeScope::~TapeScope() { active_tape = previous_; }

void backward(const Tensor& root) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw StateError("backward without an active tape");
  tape->backward(root);
}

}  // namespace shardtrain
