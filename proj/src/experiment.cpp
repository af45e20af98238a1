// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/experiment.hpp"

#include <chrono>

#include "mtlora/errors.hpp"
#include "mtlora/metrics.hpp"

namespace mtlora {

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j{{"config", to_json(r.config)},
                   {"losses", r.losses},
                   {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()},
                   {"report", to_json(r.metrics)},
                   {"seconds", r.seconds}};
  j["delta_m"] = r.delta_m ? nlohmann::json(*r.delta_m) : nlohmann::json();
  return j;
}

Splits make_splits(const RunConfig& run) {
  const auto size = run.model.backbone.image_size;
  return {Dataset(Split::kTrain, run.data, size), Dataset(Split::kVal, run.data, size)};
}

RunReport run_training(const RunConfig& run, const Splits& data, const StepCallback& on_step,
                       std::unique_ptr<MultiTaskModel<float>>* model_out) {
  if (data.train.image_size() != run.model.backbone.image_size) {
    throw ConfigError("dataset resolution " + std::to_string(data.train.image_size()) +
                      " does not match the model's " + std::to_string(run.model.backbone.image_size));
  }
  const auto start = std::chrono::steady_clock::now();
  auto model = std::make_unique<MultiTaskModel<float>>(run.model, run.train.seed);
  Trainer trainer(*model, run.train);
  RunReport r;
  r.config = run;
  r.losses = trainer.fit(data.train, on_step);
  r.metrics = evaluate(*model, data.val);
  r.metrics.steps = trainer.steps_done();
  bool covered = !run.baselines.empty();
  for (const auto& t : run.model.tasks) covered = covered && run.baselines.count(t.id);
  if (covered) {
    std::map<TaskId, double> base;
    for (const auto& t : run.model.tasks) base[t.id] = run.baselines.at(t.id);
    r.delta_m = delta_m(r.metrics.metrics, base, lower_is_better(run.model));
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (model_out) *model_out = std::move(model);
  return r;
}

RunConfig single_task_config(const RunConfig& run, const TaskId& task) {
  RunConfig out = run;
  out.model.tasks = {run.model.task(task)};
  out.model.tasks.front().weight = 1.0;
  out.model.adapters.strategy = Strategy::kFullFinetune;
  out.model.freeze = FreezePolicy::for_strategy(Strategy::kFullFinetune);
  out.model.backbone.patch_merge_mode.reset();
  out.baselines.clear();
  return out;
}

}  // namespace mtlora
