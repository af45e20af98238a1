// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/heads.hpp"

#include "mtlora/errors.hpp"
#include "mtlora/ops.hpp"

namespace mtlora {

template <typename T>
TaskHead<T>::TaskHead(const TaskSpec& task, const ModelConfig& cfg)
    : task_(task), dim_(cfg.fusion_dim()) {
  const std::string prefix = "heads." + task.id;
  for (int s = 0; s < cfg.backbone.num_stages(); ++s) {
    proj_.emplace_back(prefix + ".fusion.proj" + std::to_string(s), cfg.backbone.stage_dim(s),
                       dim_);
  }
  for (std::int64_t i = 0; i < cfg.head.residual_blocks; ++i) {
    const std::string name = prefix + ".fusion.res" + std::to_string(i);
    blocks_.emplace_back(Linear<T>(name + ".fc1", dim_, dim_), Linear<T>(name + ".fc2", dim_, dim_));
  }
  head_ = Linear<T>(prefix + ".head", dim_, task.out_channels);
}

template <typename T>
void TaskHead<T>::init(const Rng& rng) {
  for (auto& p : proj_) p.init(rng.fork(p.weight.name));
  for (auto& [a, b] : blocks_) {
    a.init(rng.fork(a.weight.name));
    b.init(rng.fork(b.weight.name));
  }
  head_.init(rng.fork(head_.weight.name));
}

template <typename T>
Tensor<T> TaskHead<T>::fuse(const std::vector<ScaleFeature<T>>& scales) const {
  if (scales.size() != proj_.size()) {
    throw ConfigError("head '" + task_.id + "' expects " + std::to_string(proj_.size()) +
                      " scales, got " + std::to_string(scales.size()));
  }
  const std::int64_t b = scales[0].tokens.dim(0);
  const std::int64_t h0 = scales[0].h;
  const std::int64_t w0 = scales[0].w;
  Tensor<T> acc;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const auto& f = scales[s];
    auto p = proj_[s].forward(f.tokens);
    if (f.h != h0 || f.w != w0) {
      // Resize channels-first, then return to token layout.
      auto grid = permute(reshape(p, {b, f.h, f.w, dim_}), {0, 3, 1, 2});
      p = reshape(permute(bilinear_resize(grid, h0, w0), {0, 2, 3, 1}), {b, h0 * w0, dim_});
    }
    acc = acc.defined() ? add(acc, p) : p;
  }
  for (const auto& [fc1, fc2] : blocks_) acc = add(acc, fc2.forward(gelu(fc1.forward(acc))));
  return acc;
}

template <typename T>
Tensor<T> TaskHead<T>::decode(const Tensor<T>& fused, std::int64_t h, std::int64_t w,
                              std::int64_t out_h, std::int64_t out_w) const {
  const std::int64_t b = fused.dim(0);
  const auto logits = head_.forward(fused);  // [B, h*w, out]
  const auto grid = permute(reshape(logits, {b, h, w, task_.out_channels}), {0, 3, 1, 2});
  return bilinear_resize(grid, out_h, out_w);
}

template <typename T>
Tensor<T> TaskHead<T>::forward(const std::vector<StageOutput<T>>& stages, std::int64_t out_h,
                               std::int64_t out_w) const {
  std::vector<ScaleFeature<T>> scales;
  for (const auto& so : stages) {
    auto it = so.per_task.find(task_.id);
    if (it == so.per_task.end()) {
      throw ConfigError("stage output has no features for task '" + task_.id + "'");
    }
    scales.push_back({it->second, so.h, so.w});
  }
  return decode(fuse(scales), scales[0].h, scales[0].w, out_h, out_w);
}

template <typename T>
void TaskHead<T>::collect(std::vector<ParamRef<T>>& out) {
  auto add_linear = [&](Linear<T>& l) {
    out.push_back({&l.weight, ParamGroup::kDecoders});
    out.push_back({&l.bias, ParamGroup::kDecoders});
  };
  for (auto& p : proj_) add_linear(p);
  for (auto& [a, b] : blocks_) {
    add_linear(a);
    add_linear(b);
  }
  add_linear(head_);
}

template class TaskHead<float>;
template class TaskHead<double>;
template class TaskHead<long double>;

}  // namespace mtlora
