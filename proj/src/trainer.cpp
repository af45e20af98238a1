// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/trainer.hpp"

#include <cmath>

#include "mtlora/errors.hpp"
#include "mtlora/losses.hpp"
#include "mtlora/metrics.hpp"

namespace mtlora {

template <typename T>
Adam<T>::Adam(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
void Adam<T>::step(const std::vector<ParamRef<T>>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.adam_eps);
  const T wd = static_cast<T>(cfg_.weight_decay);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (const auto& ref : params) {
    Parameter<T>& p = *ref.param;
    if (!p.trainable() || !p.value.has_grad()) continue;
    auto& st = state_[p.name];
    const auto n = static_cast<std::size_t>(p.numel());
    if (st.m.size() != n) {
      st.m.assign(n, T(0));
      st.v.assign(n, T(0));
    }
    const auto g = p.value.grad();
    auto w = p.value.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const T gi = g[i] + wd * w[i];
      st.m[i] = b1 * st.m[i] + (T(1) - b1) * gi;
      st.v[i] = b2 * st.v[i] + (T(1) - b2) * gi * gi;
      const T mhat = st.m[i] * inv_bc1;
      const T vhat = st.v[i] * inv_bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
Tensor<T> task_loss(const TaskSpec& task, const Tensor<T>& logits, const Batch& batch) {
  switch (task.target) {
    case TaskTarget::kSemseg: return cross_entropy(logits, std::span<const std::uint8_t>(batch.semseg));
    case TaskTarget::kParts: return cross_entropy(logits, std::span<const std::uint8_t>(batch.parts));
    case TaskTarget::kSaliency:
      return balanced_bce(logits, std::span<const std::uint8_t>(batch.saliency));
    case TaskTarget::kNormals: return normals_l1(logits, std::span<const float>(batch.normals));
  }
  throw ConfigError("task '" + task.id + "' has an unknown target");
}

template <typename T>
std::map<TaskId, Tensor<T>> task_losses(const ModelConfig& cfg, const TaskTensors<T>& logits,
                                        const Batch& batch) {
  std::map<TaskId, Tensor<T>> out;
  for (const auto& task : cfg.tasks) {
    auto it = logits.find(task.id);
    if (it == logits.end()) throw ConfigError("no prediction for task '" + task.id + "'");
    out[task.id] = task_loss(task, it->second, batch);
  }
  return out;
}

std::map<TaskId, double> task_weights(const ModelConfig& cfg) {
  std::map<TaskId, double> w;
  for (const auto& t : cfg.tasks) w[t.id] = t.weight;
  return w;
}

std::map<TaskId, bool> lower_is_better(const ModelConfig& cfg) {
  std::map<TaskId, bool> l;
  for (const auto& t : cfg.tasks) l[t.id] = t.lower_is_better();
  return l;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"metrics", r.metrics}, {"trainable_params", r.trainable_params}, {"steps", r.steps}};
}

Trainer::Trainer(MultiTaskModel<float>& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), weights_(task_weights(model.config())), optimizer_(cfg) {}

StepResult Trainer::train_step(const Batch& batch) {
  auto params = model_.params();
  for (auto& ref : params) ref.param->value.clear_grad();
  const auto logits = model_.forward(batch.images);
  const auto losses = task_losses(model_.config(), logits, batch);
  StepResult res;
  for (const auto& [task, l] : losses) {
    const double v = static_cast<double>(l.item());
    if (!std::isfinite(v)) {
      throw NumericError("non-finite loss for task '" + task + "' at step " +
                         std::to_string(optimizer_.steps() + 1));
    }
    res.task_losses[task] = v;
  }
  const auto total = mtl_loss(losses, weights_);
  res.loss = static_cast<double>(total.item());
  if (!std::isfinite(res.loss)) throw NumericError("non-finite weighted loss");
  if (total.has_tape()) total.backward();
  optimizer_.step(params);
  return res;
}

std::vector<double> Trainer::fit(const Dataset& train,
                                 const std::function<void(std::int64_t, const StepResult&)>& on_step) {
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(cfg_.steps));
  std::int64_t epoch = 0;
  while (static_cast<std::int64_t>(losses.size()) < cfg_.steps) {
    auto batches = make_batches(epoch_order(train.size(), cfg_.seed, epoch), cfg_.batch_size);
    // Drop a short tail batch unless it is all there is.
    if (batches.size() > 1 && static_cast<std::int64_t>(batches.back().size()) < cfg_.batch_size) {
      batches.pop_back();
    }
    for (const auto& idx : batches) {
      if (static_cast<std::int64_t>(losses.size()) >= cfg_.steps) break;
      const auto res = train_step(make_batch(train, idx));
      losses.push_back(res.loss);
      if (on_step) on_step(static_cast<std::int64_t>(losses.size()), res);
    }
    ++epoch;
  }
  return losses;
}

MetricReport evaluate(MultiTaskModel<float>& model, const Dataset& val, std::int64_t batch_size) {
  if (val.size() == 0) throw UsageError("cannot evaluate on an empty split");
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  std::map<TaskId, ConfusionMatrix> cms;
  std::map<TaskId, AngularError> ang;
  for (const auto& t : cfg.tasks) {
    if (t.metric == MetricKind::kMiou) {
      cms.emplace(t.id, ConfusionMatrix(t.loss == LossKind::kBalancedBce ? 2 : t.out_channels));
    } else {
      ang.emplace(t.id, AngularError());
    }
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(val.size()));
  for (std::int64_t i = 0; i < val.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  for (const auto& idx : make_batches(order, batch_size)) {
    const Batch batch = make_batch(val, idx);
    const auto logits = model.forward(batch.images);
    for (const auto& t : cfg.tasks) {
      const auto& z = logits.at(t.id);
      switch (t.target) {
        case TaskTarget::kSemseg: cms.at(t.id).add(argmax_channels(z), batch.semseg); break;
        case TaskTarget::kParts: cms.at(t.id).add(argmax_channels(z), batch.parts); break;
        case TaskTarget::kSaliency: cms.at(t.id).add(threshold_logits(z), batch.saliency); break;
        case TaskTarget::kNormals:
          ang.at(t.id).add(z.data(), batch.normals, z.dim(2) * z.dim(3));
          break;
      }
    }
  }
  MetricReport r;
  for (const auto& [id, cm] : cms) r.metrics[id] = cm.miou();
  for (const auto& [id, a] : ang) r.metrics[id] = a.rmse();
  r.trainable_params = model.trainable_count();
  return r;
}

ModelConfig tiny_check_config() {
  ModelConfig cfg;
  cfg.backbone.image_size = 8;
  cfg.backbone.patch_size = 4;
  cfg.backbone.embed_dim = 8;
  cfg.backbone.depths = {2};
  cfg.backbone.heads = {2};
  cfg.adapters.r_shared = 2;
  cfg.adapters.r_ts = 2;
  cfg.freeze = FreezePolicy::for_strategy(cfg.adapters.strategy);
  for (const auto& t : default_tasks()) {
    if (t.target == TaskTarget::kSemseg || t.target == TaskTarget::kSaliency) cfg.tasks.push_back(t);
  }
  return cfg;
}

GradCheckResult model_grad_check(std::uint64_t seed) {
  const ModelConfig cfg = tiny_check_config();
  MultiTaskModel<double> model(cfg, seed);
  MultiTaskModel<long double> reference(cfg, seed);
  const Rng rng = Rng(seed).fork("gradcheck");
  std::vector<Parameter<double>*> params;
  std::vector<Parameter<long double>*> ref_params;
  auto refs = reference.params();
  auto own = model.params();
  for (std::size_t k = 0; k < own.size(); ++k) {
    auto& p = *own[k].param;
    if (own[k].adapter) {
      Rng r = rng.fork(p.name);
      for (auto& v : p.value.mutable_data()) v = r.uniform(-0.5, 0.5);
    }
    auto dst = refs[k].param->value.mutable_data();
    std::copy(p.value.data().begin(), p.value.data().end(), dst.begin());
    if (p.trainable()) {
      params.push_back(&p);
      ref_params.push_back(refs[k].param);
    }
  }
  const std::int64_t b = 2, s = cfg.backbone.image_size;
  const auto plane = static_cast<std::size_t>(b * s * s);
  Rng data = rng.fork("batch");
  std::vector<double> pixels(3 * plane);
  for (auto& v : pixels) v = data.uniform();
  const Tensor<double> images({b, 3, s, s}, pixels);
  const Tensor<long double> ref_images({b, 3, s, s}, std::vector<long double>(pixels.begin(), pixels.end()));
  Batch batch;
  batch.semseg.resize(plane);
  batch.saliency.resize(plane);
  const auto classes = cfg.task("semseg").out_channels;
  for (std::size_t i = 0; i < plane; ++i) {
    batch.semseg[i] = static_cast<std::uint8_t>(data.uniform() * static_cast<double>(classes));
    batch.saliency[i] = batch.semseg[i] > 0;
  }
  const auto weights = task_weights(cfg);
  auto objective = [&](const auto& m, const auto& x) {
    const auto logits = m.forward(x);
    using T = typename std::decay_t<decltype(x)>::value_type;
    std::map<TaskId, Tensor<T>> losses;
    for (const auto& t : cfg.tasks) losses[t.id] = task_loss(t, logits.at(t.id), batch);
    return mtl_loss(losses, weights);
  };
  return grad_check([&] { return objective(model, images); }, params,
                    [&] { return objective(reference, ref_images); }, ref_params);
}

template class Adam<float>;
template class Adam<double>;
template Tensor<float> task_loss(const TaskSpec&, const Tensor<float>&, const Batch&);
template Tensor<double> task_loss(const TaskSpec&, const Tensor<double>&, const Batch&);
template Tensor<long double> task_loss(const TaskSpec&, const Tensor<long double>&, const Batch&);
template std::map<TaskId, Tensor<float>> task_losses(const ModelConfig&, const TaskTensors<float>&,
                                                     const Batch&);
template std::map<TaskId, Tensor<double>> task_losses(const ModelConfig&,
                                                      const TaskTensors<double>&, const Batch&);

}  // namespace mtlora
