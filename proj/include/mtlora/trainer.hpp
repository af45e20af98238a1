// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlora/data.hpp"
#include "mtlora/gradcheck.hpp"
#include "mtlora/model.hpp"

namespace mtlora {

// Adaptive-moment optimizer with optional L2 weight decay folded into the
// gradient. Only trainable parameters holding a gradient are touched.
template <typename T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg);
  void step(const std::vector<ParamRef<T>>& params);
  std::int64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  TrainConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Loss for one task against the matching label planes of a batch.
template <typename T>
Tensor<T> task_loss(const TaskSpec& task, const Tensor<T>& logits, const Batch& batch);

template <typename T>
std::map<TaskId, Tensor<T>> task_losses(const ModelConfig& cfg, const TaskTensors<T>& logits,
                                        const Batch& batch);

std::map<TaskId, double> task_weights(const ModelConfig& cfg);

struct StepResult {
  double loss = 0.0;
  std::map<TaskId, double> task_losses;
};

struct MetricReport {
  std::map<TaskId, double> metrics;  // mIoU in [0, 1] or angular rmse in degrees
  std::int64_t trainable_params = 0;
  std::int64_t steps = 0;

  bool operator==(const MetricReport&) const = default;
};

nlohmann::json to_json(const MetricReport& r);

class Trainer {
 public:
  Trainer(MultiTaskModel<float>& model, const TrainConfig& cfg);

  // One forward over all tasks, one backward, one optimizer update.
  StepResult train_step(const Batch& batch);
  // Runs cfg.steps steps over shuffled epochs of `train`; returns per-step
  // total losses. `on_step` (optional) sees every step.
  std::vector<double> fit(const Dataset& train,
                          const std::function<void(std::int64_t, const StepResult&)>& on_step = {});
  std::int64_t steps_done() const { return optimizer_.steps(); }

 private:
  MultiTaskModel<float>& model_;
  TrainConfig cfg_;
  std::map<TaskId, double> weights_;
  Adam<float> optimizer_;
};

MetricReport evaluate(MultiTaskModel<float>& model, const Dataset& val, std::int64_t batch_size = 16);

// Tiny 64-bit model for end-to-end gradient checks: one stage of two blocks,
// C=8, 8x8 input, semseg and saliency heads.
ModelConfig tiny_check_config();

// Builds the tiny model, randomizes every adapter factor (so B is nonzero)
// and checks the weighted multi-task loss on a random batch of two.
GradCheckResult model_grad_check(std::uint64_t seed = 0);

std::map<TaskId, bool> lower_is_better(const ModelConfig& cfg);

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace mtlora
