// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtlora/config.hpp"
#include "mtlora/lora.hpp"
#include "mtlora/parameter.hpp"
#include "mtlora/rng.hpp"

namespace mtlora {

// Accounting groups; every parameter belongs to exactly one.
enum class ParamGroup {
  kBaseWeights,
  kSharedAdapters,
  kTaskAdapters,
  kDecoders,
  kPatchEmbed,
  kPatchMerging,
  kLayerNorm,
  kPositionBias,
  kBiases,
};
inline constexpr int kNumParamGroups = 9;
std::string to_string(ParamGroup g);

template <typename T>
struct ParamRef {
  Parameter<T>* param;
  ParamGroup group;
  bool adapter = false;  // adapter factors are trainable under every policy
};

template <typename T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::int64_t dim, double eps);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(std::vector<ParamRef<T>>& out);
};

enum class BlockKind { kTaskAgnostic, kTaskSpecific };

// Features leaving one stage. Tensors are [B, h*w, dim] in row-major grid order.
template <typename T>
struct StageOutput {
  Tensor<T> shared;
  TaskTensors<T> per_task;
  std::int64_t h = 0;
  std::int64_t w = 0;
};

// Pre-norm transformer block with global multi-head attention over the stage
// grid and a learned relative position bias per head.
template <typename T>
class Block {
 public:
  Block(const std::string& name, const ModelConfig& cfg, int stage, BlockKind kind);

  BlockKind kind() const { return kind_; }
  void init(const Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  // Task-specific block: `shared` continues the trunk, `tasks` exit the stage.
  MultiOutput<T> forward_ts(const Tensor<T>& x, std::span<const TaskId> tasks) const;
  void collect(std::vector<ParamRef<T>>& out);

  MTLoRALinear<T>& qkv() { return qkv_; }
  MTLoRALinear<T>& proj() { return proj_; }
  MTLoRALinear<T>& fc1() { return fc1_; }
  MTLoRALinear<T>& fc2() { return fc2_; }
  std::vector<MTLoRALinear<T>*> linears() { return {&qkv_, &proj_, &fc1_, &fc2_}; }

 private:
  // qkv output [B, N, 3C] -> attention output [B, N, C].
  Tensor<T> attend(const Tensor<T>& qkv_out) const;

  std::string name_;
  BlockKind kind_;
  std::int64_t dim_, heads_, grid_;
  LayerNorm<T> norm1_, norm2_;
  MTLoRALinear<T> qkv_, proj_, fc1_, fc2_;
  Parameter<T> pos_bias_;  // [heads, (2h-1)(2w-1)]
  std::vector<std::int64_t> pos_index_;
};

// 2x2 neighbour concatenation, layer norm, and a 4C -> 2C linear.
template <typename T>
class PatchMerging {
 public:
  PatchMerging(const std::string& name, const ModelConfig& cfg, int stage);
  void init(const Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const;
  void collect(std::vector<ParamRef<T>>& out);
  MTLoRALinear<T>& reduction() { return reduction_; }

 private:
  LayerNorm<T> norm_;
  MTLoRALinear<T> reduction_;
};

template <typename T>
class Backbone {
 public:
  explicit Backbone(const ModelConfig& cfg);

  void init(const Rng& rng);
  // images [B, C, H, W] -> one StageOutput per stage.
  std::vector<StageOutput<T>> forward(const Tensor<T>& images) const;
  void collect(std::vector<ParamRef<T>>& out);

  int num_stages() const { return static_cast<int>(stages_.size()); }
  std::vector<Block<T>>& stage(int s) { return stages_[static_cast<std::size_t>(s)]; }
  const std::vector<Block<T>>& stage(int s) const { return stages_[static_cast<std::size_t>(s)]; }
  std::vector<PatchMerging<T>>& merges() { return merges_; }
  std::vector<MTLoRALinear<T>*> adapted_linears();

 private:
  BackboneConfig cfg_;
  std::vector<TaskId> tasks_;
  Linear<T> embed_;
  LayerNorm<T> embed_norm_;
  std::vector<std::vector<Block<T>>> stages_;
  std::vector<PatchMerging<T>> merges_;
};

extern template class Block<float>;
extern template class Block<double>;
extern template class Block<long double>;
extern template class PatchMerging<float>;
extern template class PatchMerging<double>;
extern template class PatchMerging<long double>;
extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class Backbone<long double>;

}  // namespace mtlora
