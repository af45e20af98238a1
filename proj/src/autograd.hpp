// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "mtlora/tensor.hpp"

namespace mtlora::detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* in : inputs) {
    if (in != nullptr && in->defined() && in->requires_grad()) return true;
  }
  return false;
}

// Wraps freshly computed data as an op output, recording a tape node when
// any input participates in differentiation.
template <typename T>
Tensor<T> make_output(Shape shape, Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (any_requires_grad(inputs)) {
    auto node = std::make_shared<Node<T>>();
    for (const auto* in : inputs) {
      if (in != nullptr && in->defined() && in->requires_grad()) node->inputs.push_back(in->impl());
    }
    node->backward = std::move(backward);
    impl->requires_grad = true;
    impl->node = std::move(node);
  }
  return Tensor<T>::from_impl(std::move(impl));
}

}  // namespace mtlora::detail
