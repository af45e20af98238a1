// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>

#include "mtlora/config.hpp"
#include "mtlora/tensor.hpp"

namespace mtlora {

// Mean per-pixel softmax cross-entropy. logits [B, K, H, W], labels [B*H*W]
// in [0, K).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

// Mean |n - target| over channels and pixels, where n is the prediction
// normalized to unit length per pixel. pred and target are [B, 3, H, W].
template <typename T>
Tensor<T> normals_l1(const Tensor<T>& pred, std::span<const float> target);

// Class-balanced binary cross-entropy on logits [B, 1, H, W] with weights
// N/(2 N+) and N/(2 N-) over the batch. Probabilities are clamped to
// [1e-6, 1 - 1e-6]. Falls back to unit weights (with a warning) when the batch
// lacks one of the two classes.
template <typename T>
Tensor<T> balanced_bce(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

// Weighted sum over tasks; every task needs a weight.
template <typename T>
Tensor<T> mtl_loss(const std::map<TaskId, Tensor<T>>& losses,
                   const std::map<TaskId, double>& weights);

}  // namespace mtlora
