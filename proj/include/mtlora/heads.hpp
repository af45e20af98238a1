// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtlora/backbone.hpp"

namespace mtlora {

// One input scale for fusion: tokens [B, h*w, dim] on an h x w grid.
template <typename T>
struct ScaleFeature {
  Tensor<T> tokens;
  std::int64_t h = 0;
  std::int64_t w = 0;
};

// Per-task multi-scale fusion and dense decoder. Every scale is projected to
// D, resized to the finest grid and summed; residual blocks
// (linear, GELU, linear, skip) follow, then a linear head and a bilinear
// resize to the image resolution.
template <typename T>
class TaskHead {
 public:
  TaskHead(const TaskSpec& task, const ModelConfig& cfg);

  void init(const Rng& rng);
  // -> [B, h0*w0, D] on the finest grid.
  Tensor<T> fuse(const std::vector<ScaleFeature<T>>& scales) const;
  // fused [B, h*w, D] -> logits [B, out_channels, out_h, out_w].
  Tensor<T> decode(const Tensor<T>& fused, std::int64_t h, std::int64_t w, std::int64_t out_h,
                   std::int64_t out_w) const;
  // Picks this task's features from every stage.
  Tensor<T> forward(const std::vector<StageOutput<T>>& stages, std::int64_t out_h,
                    std::int64_t out_w) const;
  void collect(std::vector<ParamRef<T>>& out);

  const TaskSpec& task() const { return task_; }
  std::vector<Linear<T>>& projections() { return proj_; }
  std::vector<std::pair<Linear<T>, Linear<T>>>& residual_blocks() { return blocks_; }
  Linear<T>& head() { return head_; }

 private:
  TaskSpec task_;
  std::int64_t dim_;
  std::vector<Linear<T>> proj_;
  std::vector<std::pair<Linear<T>, Linear<T>>> blocks_;
  Linear<T> head_;
};

extern template class TaskHead<float>;
extern template class TaskHead<double>;
extern template class TaskHead<long double>;

}  // namespace mtlora
