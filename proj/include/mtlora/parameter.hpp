// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>

#include "mtlora/tensor.hpp"

namespace mtlora {

// A named leaf tensor owned by a model. Frozen parameters never record
// gradients, so their grad buffer is never allocated.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)) {
    value.set_requires_grad(trainable);
  }

  bool trainable() const { return value.requires_grad(); }
  void set_trainable(bool t) { value.set_requires_grad(t); }
  std::int64_t numel() const { return value.numel(); }
};

}  // namespace mtlora
