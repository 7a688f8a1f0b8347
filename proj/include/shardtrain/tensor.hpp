// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shardtrain {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Post-accumulation callback; receives the owning parameter's index.
using PostHook = std::function<void(std::size_t parameter_index)>;

/// Per-parameter gradient sink. The accumulated values live in the owning
/// tensor's grad buffer; hooks run once per backward pass after the
/// parameter's last gradient contribution has been added.
struct GradAccumulator {
  std::size_t parameter_index = 0;
  std::vector<PostHook> post_hooks;
};

/// Position of a tensor on a specific tape.
struct NodeRef {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::optional<NodeRef> node;
  std::optional<GradAccumulator> accumulator;
};

}  // namespace detail

/// Dense row-major float64 tensor with shared ownership semantics: copies of
/// a Tensor alias the same storage, mirroring framework tensor handles.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct mutation is reserved for optimizers and parameter loading.
  std::span<double> mutable_values();
  double item() const;
  Tensor clone() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Adds `delta` into the grad buffer, allocating zeros first if needed.
  void accumulate_grad(std::span<const double> delta);
  void zero_grad();
  void clear_grad();

  GradAccumulator& ensure_accumulator(std::size_t parameter_index);
  const GradAccumulator* accumulator() const;
  void add_post_hook(PostHook hook);

  /// Storage residency, used by sharded training to drop and restore the
  /// full values of a parameter. Shape is preserved.
  bool resident() const;
  void release_storage();
  void assign_storage(std::vector<double> values);

  const std::optional<NodeRef>& node() const;
  void set_node(NodeRef ref);

  bool same_as(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  const void* identity() const noexcept { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace shardtrain
