// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "mtlora/config.hpp"
#include "mtlora/tensor.hpp"

namespace mtlora {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t classes);

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
  void merge(const ConfusionMatrix& other);
  // Mean of TP / (TP + FP + FN) over classes present in the prediction or the
  // ground truth.
  double miou() const;
  std::int64_t classes() const { return classes_; }
  std::int64_t count(std::int64_t truth, std::int64_t pred) const;

 private:
  std::int64_t classes_;
  std::vector<std::int64_t> counts_;  // [truth][pred]
};

// Accumulates squared angles (degrees) between predicted and true normals.
class AngularError {
 public:
  // pred and truth are [B, 3, H, W] flattened; pred need not be unit length.
  void add(std::span<const float> pred, std::span<const float> truth, std::int64_t hw);
  void merge(const AngularError& other);
  double rmse() const;
  std::int64_t pixels() const { return pixels_; }

 private:
  double sum_sq_ = 0.0;
  std::int64_t pixels_ = 0;
};

// Per-pixel argmax over channels of logits [B, K, H, W].
std::vector<std::uint8_t> argmax_channels(const Tensor<float>& logits);
// Foreground where the saliency logit is positive.
std::vector<std::uint8_t> threshold_logits(const Tensor<float>& logits);

// 100 * (1/T) sum_i (-1)^{l_i} (M_i - Mst_i) / Mst_i over the tasks in
// `metrics`; every task needs a nonzero baseline.
double delta_m(const std::map<TaskId, double>& metrics, const std::map<TaskId, double>& baselines,
               const std::map<TaskId, bool>& lower_is_better);

}  // namespace mtlora
