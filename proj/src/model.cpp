// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/model.hpp"

#include "mtlora/errors.hpp"

namespace mtlora {

bool is_trainable(ParamGroup group, bool adapter, const FreezePolicy& policy, PatchMergeMode mode) {
  if (adapter) return true;
  switch (group) {
    case ParamGroup::kBaseWeights: return policy.train_base_weights;
    case ParamGroup::kSharedAdapters:
    case ParamGroup::kTaskAdapters:
    case ParamGroup::kDecoders: return true;
    case ParamGroup::kPatchEmbed: return policy.train_patch_embed;
    case ParamGroup::kPatchMerging:
      return mode == PatchMergeMode::kUnfrozen || policy.train_base_weights;
    case ParamGroup::kLayerNorm: return policy.train_layer_norm;
    case ParamGroup::kPositionBias: return policy.train_position_bias;
    case ParamGroup::kBiases: return policy.train_biases;
  }
  return false;
}

template <typename T>
MultiTaskModel<T>::MultiTaskModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed), backbone_(cfg) {
  const Rng rng(seed);
  backbone_.init(rng);
  for (const auto& task : cfg_.tasks) {
    auto [it, inserted] = heads_.emplace(task.id, TaskHead<T>(task, cfg_));
    it->second.init(rng);
  }
  apply_freeze();
}

template <typename T>
ModelOutput<T> MultiTaskModel<T>::forward_all(const Tensor<T>& images) const {
  ModelOutput<T> out;
  out.stages = backbone_.forward(images);
  for (const auto& [id, head] : heads_) {
    out.logits[id] = head.forward(out.stages, images.dim(2), images.dim(3));
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> MultiTaskModel<T>::params() {
  std::vector<ParamRef<T>> out;
  backbone_.collect(out);
  for (auto& [id, head] : heads_) head.collect(out);
  return out;
}

template <typename T>
Parameter<T>* MultiTaskModel<T>::find(const std::string& name) {
  for (auto& ref : params()) {
    if (ref.param->name == name) return ref.param;
  }
  return nullptr;
}

template <typename T>
std::int64_t MultiTaskModel<T>::trainable_count() {
  std::int64_t n = 0;
  for (auto& ref : params()) {
    if (ref.param->trainable()) n += ref.param->numel();
  }
  return n;
}

template <typename T>
void MultiTaskModel<T>::apply_freeze() {
  const auto mode = cfg_.merge_mode();
  for (auto& ref : params()) {
    ref.param->set_trainable(is_trainable(ref.group, ref.adapter, cfg_.freeze, mode));
  }
}

template <typename T>
void MultiTaskModel<T>::merge_shared_adapters() {
  for (auto* lin : backbone_.adapted_linears()) {
    if (lin->has_shared() && lin->task_adapters().empty()) lin->merge_shared_in_place();
  }
  shared_merged_ = true;
}

template class MultiTaskModel<float>;
template class MultiTaskModel<double>;
template class MultiTaskModel<long double>;

}  // namespace mtlora
