// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include "shardtrain/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "shardtrain/error.hpp"

namespace shardtrain {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw StateError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  auto& i = impl();
  if (i.data.size() != shape_numel(i.shape)) throw StateError("tensor storage is not resident");
  return i.data;
}

std::span<double> Tensor::mutable_values() {
  auto& i = impl();
  if (i.data.size() != shape_numel(i.shape)) throw StateError("tensor storage is not resident");
  return i.data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_to_string(shape()));
  return values()[0];
}

Tensor Tensor::clone() const {
  auto v = values();
  return from(shape(), std::vector<double>(v.begin(), v.end()), requires_grad());
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return impl().grad.has_value(); }

std::span<const double> Tensor::grad() const {
  auto& i = impl();
  if (!i.grad) throw StateError("tensor has no gradient");
  return *i.grad;
}

std::span<double> Tensor::mutable_grad() {
  auto& i = impl();
  if (!i.grad) i.grad.emplace(shape_numel(i.shape), 0.0);
  return *i.grad;
}

void Tensor::accumulate_grad(std::span<const double> delta) {
  auto g = mutable_grad();
  if (delta.size() != g.size()) throw DimensionError("gradient size mismatch for shape " + shape_to_string(shape()));
  for (std::size_t k = 0; k < g.size(); ++k) g[k] += delta[k];
}

void Tensor::zero_grad() {
  auto& i = impl();
  if (i.grad) std::fill(i.grad->begin(), i.grad->end(), 0.0);
}

void Tensor::clear_grad() { impl().grad.reset(); }

GradAccumulator& Tensor::ensure_accumulator(std::size_t parameter_index) {
  auto& i = impl();
  if (!i.accumulator) {
    i.accumulator.emplace();
    i.accumulator->parameter_index = parameter_index;
  }
  return *i.accumulator;
}

const GradAccumulator* Tensor::accumulator() const {
  auto& i = impl();
  return i.accumulator ? &*i.accumulator : nullptr;
}

void Tensor::add_post_hook(PostHook hook) {
  auto& i = impl();
  if (!i.accumulator) throw StateError("add_post_hook on tensor without a gradient accumulator");
  i.accumulator->post_hooks.push_back(std::move(hook));
}

bool Tensor::resident() const {
  auto& i = impl();
  return i.data.size() == shape_numel(i.shape);
}

void Tensor::release_storage() {
  auto& i = impl();
  std::vector<double>().swap(i.data);
}

void Tensor::assign_storage(std::vector<double> values) {
  auto& i = impl();
  if (values.size() != shape_numel(i.shape)) {
    throw DimensionError("storage of " + std::to_string(values.size()) + " values does not fit shape " +
                         shape_to_string(i.shape));
  }
  i.data = std::move(values);
}

const std::optional<NodeRef>& Tensor::node() const { return impl().node; }
void Tensor::set_node(NodeRef ref) { impl().node = ref; }

}  // namespace shardtrain
