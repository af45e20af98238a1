// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mtlora/backbone.hpp"
#include "mtlora/config.hpp"

namespace mtlora {

// A named architecture counted analytically; nothing is allocated. `window`
// is the attention window side used for position-bias tables and attention
// cost (0 means global attention over the stage grid, as in the live model).
struct ArchPreset {
  std::string name;
  ModelConfig model;
  std::int64_t window = 0;
};

std::vector<std::string> preset_names();
// Throws UsageError for an unknown name.
ArchPreset find_preset(std::string_view name);

// Switches the adapter strategy and resets the freeze policy to its defaults.
// Throws UsageError for an unknown strategy name.
ModelConfig with_strategy(ModelConfig cfg, std::string_view strategy);

enum class FlopsMode { kShared, kIndividual };

struct GroupCount {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
};

struct FlopsRow {
  std::int64_t tasks = 0;
  std::uint64_t shared = 0;
  std::uint64_t individual = 0;
};

struct AuditReport {
  std::string strategy;
  std::map<ParamGroup, GroupCount> groups;  // every group, zeros included
  std::int64_t total_params = 0;
  std::int64_t trainable_params = 0;
  // Trainable scalars no task loss depends on: the adapters that only feed
  // the trunk continuation of the final task-specific block. They are
  // trainable but never receive a gradient.
  std::int64_t unreachable_trainable = 0;
  std::vector<FlopsRow> flops;  // per task count, batch of one

  std::int64_t reachable_trainable() const { return trainable_params - unreachable_trainable; }
};

// Exact parameter accounting mirroring model construction.
AuditReport count_trainable(const ModelConfig& cfg, std::int64_t window = 0);

// Forward FLOPs (multiply-add = 2) of matmuls and linear layers only.
// Shared mode runs one backbone for the first k tasks; individual mode sums
// k single-task models. Throws UsageError unless 1 <= k <= number of tasks.
std::uint64_t estimate_flops(const ModelConfig& cfg, std::int64_t k, FlopsMode mode,
                             std::int64_t window = 0, std::int64_t batch = 1);

// What one task adds on top of the shared trunk: its task-specific branches
// and its decoder.
std::uint64_t task_path_flops(const ModelConfig& cfg, const TaskId& task, std::int64_t window = 0,
                              std::int64_t batch = 1);

// Counts plus the FLOPs table for k = 1..number of tasks.
AuditReport audit(const ModelConfig& cfg, std::int64_t window = 0);

nlohmann::json to_json(const AuditReport& r);
std::string format_report(const AuditReport& r);

}  // namespace mtlora
