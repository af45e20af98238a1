// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mtlora/backbone.hpp"
#include "mtlora/heads.hpp"

namespace mtlora {

// Trainability of one parameter under a freeze policy.
bool is_trainable(ParamGroup group, bool adapter, const FreezePolicy& policy, PatchMergeMode mode);

template <typename T>
struct ModelOutput {
  std::vector<StageOutput<T>> stages;
  TaskTensors<T> logits;  // [B, out_channels, H, W] per task
};

// Shared backbone plus one head per task. Every parameter is initialized from
// its own stream forked off the seed by name, so two models built from the
// same seed agree on every parameter they have in common.
template <typename T>
class MultiTaskModel {
 public:
  MultiTaskModel(const ModelConfig& cfg, std::uint64_t seed);
  MultiTaskModel(const MultiTaskModel&) = delete;
  MultiTaskModel& operator=(const MultiTaskModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  ModelOutput<T> forward_all(const Tensor<T>& images) const;
  TaskTensors<T> forward(const Tensor<T>& images) const { return forward_all(images).logits; }

  // Backbone parameters first, then heads in task order.
  std::vector<ParamRef<T>> params();
  Parameter<T>* find(const std::string& name);
  std::int64_t trainable_count();
  void apply_freeze();

  // Folds shared adapters into the base weight of every layer without task
  // adapters. Layers with task adapters keep theirs, since the task branches
  // read the unadapted base weight.
  void merge_shared_adapters();
  bool shared_merged() const { return shared_merged_; }

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  std::map<TaskId, TaskHead<T>>& heads() { return heads_; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  Backbone<T> backbone_;
  std::map<TaskId, TaskHead<T>> heads_;
  bool shared_merged_ = false;
};

extern template class MultiTaskModel<float>;
extern template class MultiTaskModel<double>;
extern template class MultiTaskModel<long double>;

}  // namespace mtlora
