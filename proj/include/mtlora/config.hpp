// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mtlora/lora.hpp"

namespace mtlora {

enum class Strategy { kMtlora, kMtloraPlus, kLoraOnly, kDecodersOnly, kFullFinetune };
enum class PatchMergeMode { kFrozen, kUnfrozen, kLora };
enum class AdaptLocation { kQkv, kProj, kFc1, kFc2 };
enum class LossKind { kCrossEntropy, kL1, kBalancedBce };
enum class MetricKind { kMiou, kAngularRmse };
// Which synthetic label map a task predicts.
enum class TaskTarget { kSemseg, kParts, kSaliency, kNormals };

std::string to_string(Strategy s);
std::string to_string(PatchMergeMode m);
std::string to_string(AdaptLocation l);
std::string to_string(LossKind k);
std::string to_string(MetricKind k);
std::string to_string(TaskTarget t);
std::optional<Strategy> parse_strategy(std::string_view s);

struct BackboneConfig {
  std::int64_t in_channels = 3;
  std::int64_t image_size = 64;
  std::int64_t patch_size = 4;
  std::int64_t embed_dim = 32;
  std::vector<std::int64_t> depths{2, 2, 6, 2};
  std::vector<std::int64_t> heads{2, 4, 8, 16};
  std::int64_t mlp_ratio = 4;
  double ln_eps = 1e-5;
  // Unset means "derived from the adapter strategy".
  std::optional<PatchMergeMode> patch_merge_mode;

  int num_stages() const { return static_cast<int>(depths.size()); }
  std::int64_t stage_dim(int s) const { return embed_dim << s; }
  // Token grid side of stage s.
  std::int64_t grid(int s) const { return (image_size / patch_size) >> s; }
  void validate() const;
};

struct AdapterConfig {
  Strategy strategy = Strategy::kMtlora;
  std::int64_t r_shared = 16;
  std::int64_t r_ts = 4;
  double alpha = 4.0;
  std::set<AdaptLocation> locations{AdaptLocation::kQkv, AdaptLocation::kProj,
                                    AdaptLocation::kFc1, AdaptLocation::kFc2};
  bool ts_on_qkv = false;
  // Layer-name prefix -> alpha; the longest matching prefix wins.
  std::map<std::string, double> alpha_overrides;

  bool has_shared() const;
  bool has_task_specific() const;
  double alpha_for(const std::string& layer) const;
};

struct FreezePolicy {
  bool train_patch_embed = true;
  bool train_patch_merging = true;
  bool train_layer_norm = true;
  bool train_position_bias = true;
  bool train_biases = true;
  bool train_base_weights = false;

  static FreezePolicy for_strategy(Strategy s);
  bool operator==(const FreezePolicy&) const = default;
};

struct TaskSpec {
  TaskId id;
  TaskTarget target = TaskTarget::kSemseg;
  std::int64_t out_channels = 1;
  LossKind loss = LossKind::kCrossEntropy;
  MetricKind metric = MetricKind::kMiou;
  double weight = 1.0;

  bool lower_is_better() const { return metric == MetricKind::kAngularRmse; }
  void validate() const;
};

struct HeadConfig {
  // 0 selects the stage-1 width.
  std::int64_t fusion_dim = 0;
  std::int64_t residual_blocks = 2;
};

struct ModelConfig {
  BackboneConfig backbone;
  AdapterConfig adapters;
  FreezePolicy freeze;
  HeadConfig head;
  std::vector<TaskSpec> tasks;  // sorted by id

  PatchMergeMode merge_mode() const;
  std::int64_t fusion_dim() const;
  std::vector<TaskId> task_ids() const;
  const TaskSpec& task(const TaskId& id) const;
  void validate() const;
};

struct DataConfig {
  std::int64_t train_size = 512;
  std::int64_t val_size = 128;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  // Single-task reference metrics for the relative-change summary.
  std::map<TaskId, double> baselines;
};

// The four synthetic tasks: semseg (K+1 classes), parts (5), saliency (1
// logit), normals (3).
std::vector<TaskSpec> default_tasks(std::int64_t num_classes = 3);

// Parses TOML text or its JSON echo. Missing sections take defaults; unknown
// keys are configuration errors. Strategy defaults fill the freeze policy
// before explicit [freeze] keys are applied.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(std::string_view toml_text);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& c);

}  // namespace mtlora
