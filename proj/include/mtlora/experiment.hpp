// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlora/config.hpp"
#include "mtlora/data.hpp"
#include "mtlora/model.hpp"
#include "mtlora/trainer.hpp"

namespace mtlora {

struct RunReport {
  RunConfig config;
  std::vector<double> losses;  // weighted loss per step
  MetricReport metrics;
  // Relative change against run.baselines when they cover every task.
  std::optional<double> delta_m;
  double seconds = 0.0;
};

nlohmann::json to_json(const RunReport& r);

// Train and val splits for a run's data config at the model's resolution.
struct Splits {
  Dataset train;
  Dataset val;
};
Splits make_splits(const RunConfig& run);

using StepCallback = std::function<void(std::int64_t, const StepResult&)>;

// Builds a model from run.model seeded with run.train.seed, trains it for
// run.train.steps and evaluates on the val split. The trained model is
// handed back through `model_out` when given.
RunReport run_training(const RunConfig& run, const Splits& data, const StepCallback& on_step = {},
                       std::unique_ptr<MultiTaskModel<float>>* model_out = nullptr);

// One task, its own head, every backbone weight trainable, same budget.
RunConfig single_task_config(const RunConfig& run, const TaskId& task);

}  // namespace mtlora
