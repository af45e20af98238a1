// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

#include "mtlora/errors.hpp"

namespace mtlora {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_flops = 0;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

FlopScope::FlopScope() : start_(g_flops) {}
std::uint64_t FlopScope::flops() const { return g_flops - start_; }
void count_flops(std::uint64_t flops) { g_flops += flops; }

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), Buffer<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, Buffer<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (!impl_) throw UsageError("set_requires_grad on an undefined tensor");
  impl_->requires_grad = value;
  if (!value) clear_grad();
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && impl_->grad_allocated;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::clear_grad() {
  if (!impl_) return;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->grad_allocated = false;
}

template <typename T>
bool Tensor<T>::has_tape() const {
  return impl_ && impl_->node != nullptr;
}

template <typename T>
void Tensor<T>::backward() const {
  using Impl = detail::TensorImpl<T>;
  if (!impl_) throw UsageError("backward on an undefined tensor");
  if (impl_->data.size() != 1) {
    throw UsageError("backward requires a scalar, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->node) throw UsageError("backward called on a tensor with no recorded tape");

  // Iterative post-order DFS; `order` keeps every visited tensor alive until
  // the sweep is finished, since releasing nodes drops input references.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<const Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->inputs.size()) {
      auto child = cur->node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl& t = **it;
    if (t.node && t.grad_allocated) t.node->backward(t);
  }
  for (auto& t : order) {
    if (!t->node) continue;
    t->node.reset();
    t->grad.clear();
    t->grad.shrink_to_fit();
    t->grad_allocated = false;
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = shape();
  impl->data = impl_->data;
  return from_impl(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = requires_grad();
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<long double>;

}  // namespace mtlora
