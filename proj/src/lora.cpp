// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/lora.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "mtlora/errors.hpp"
#include "mtlora/ops.hpp"

namespace mtlora {

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng rng) {
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
Linear<T>::Linear(const std::string& name, std::int64_t d_in, std::int64_t d_out, bool with_bias) {
  if (d_in <= 0 || d_out <= 0) {
    throw DimensionError("linear '" + name + "' needs positive dims, got " + std::to_string(d_in) +
                         " -> " + std::to_string(d_out));
  }
  weight = Parameter<T>(name + ".weight", Tensor<T>::zeros({d_out, d_in}));
  if (with_bias) bias = Parameter<T>(name + ".bias", Tensor<T>::zeros({d_out}));
}

template <typename T>
void Linear<T>::init(const Rng& rng) {
  const bool trainable = weight.trainable();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in()));
  weight.value = uniform_tensor<T>(weight.value.shape(), bound, rng.fork(weight.name));
  weight.set_trainable(trainable);
  if (has_bias()) {
    const bool bias_trainable = bias.trainable();
    bias.value = Tensor<T>::zeros({d_out()});
    bias.set_trainable(bias_trainable);
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return linear(x, weight.value, bias.value);
}

template <typename T>
Tensor<T> LoRAAdapter<T>::delta(const Tensor<T>& x) const {
  // Two rank-r projections; the d_out x d_in product is never formed.
  const Tensor<T> none;
  return linear(linear(x, a.value, none), b.value, none);
}

template <typename T>
MTLoRALinear<T>::MTLoRALinear(std::string name, std::int64_t d_in, std::int64_t d_out,
                              bool with_bias)
    : name_(std::move(name)), base_(name_, d_in, d_out, with_bias) {
  base_.weight.set_trainable(false);
  if (base_.has_bias()) base_.bias.set_trainable(false);
}

template <typename T>
LoRAAdapter<T> MTLoRALinear<T>::make_adapter(const std::string& prefix, std::int64_t rank) const {
  if (rank <= 0 || rank > std::min(d_in(), d_out())) {
    throw ConfigError("adapter rank " + std::to_string(rank) + " for '" + name_ +
                      "' must lie in [1, " + std::to_string(std::min(d_in(), d_out())) + "]");
  }
  LoRAAdapter<T> ad;
  ad.a = Parameter<T>(prefix + ".A", Tensor<T>::zeros({rank, d_in()}));
  ad.b = Parameter<T>(prefix + ".B", Tensor<T>::zeros({d_out(), rank}));
  return ad;
}

template <typename T>
void MTLoRALinear<T>::add_shared_adapter(std::int64_t rank) {
  shared_ = make_adapter(name_ + ".lora_shared", rank);
}

template <typename T>
void MTLoRALinear<T>::add_task_adapters(std::span<const TaskId> tasks, std::int64_t rank) {
  for (const auto& task : tasks) {
    tasks_[task] = make_adapter(name_ + ".lora_tasks." + task, rank);
  }
}

template <typename T>
void MTLoRALinear<T>::init_adapters(const Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in()));
  auto init_one = [&](LoRAAdapter<T>& ad) {
    ad.a.value = uniform_tensor<T>(ad.a.value.shape(), bound, rng.fork(ad.a.name));
    ad.a.set_trainable(true);
    ad.b.value = Tensor<T>::zeros(ad.b.value.shape());
    ad.b.set_trainable(true);
  };
  if (shared_) init_one(*shared_);
  for (auto& [task, ad] : tasks_) init_one(ad);
}

template <typename T>
Tensor<T> MTLoRALinear<T>::base_forward(const Tensor<T>& x) const {
  return base_.forward(x);
}

template <typename T>
Tensor<T> MTLoRALinear<T>::forward(const Tensor<T>& x) const {
  Tensor<T> y = base_forward(x);
  if (!shared_) return y;
  return add(y, scale(shared_->delta(x), alpha_));
}

template <typename T>
const LoRAAdapter<T>& MTLoRALinear<T>::task_adapter(const TaskId& task) const {
  auto it = tasks_.find(task);
  if (it == tasks_.end()) {
    throw ConfigError("layer '" + name_ + "' has no adapter for task '" + task + "'");
  }
  return it->second;
}

template <typename T>
MultiOutput<T> MTLoRALinear<T>::forward_multi(const Tensor<T>& x_shared,
                                              const TaskTensors<T>* x_tasks,
                                              std::span<const TaskId> tasks) const {
  MultiOutput<T> out;
  const Tensor<T> base_shared = base_forward(x_shared);
  out.shared = shared_ ? add(base_shared, scale(shared_->delta(x_shared), alpha_)) : base_shared;
  for (const auto& task : tasks) {
    if (x_tasks == nullptr) {
      // Every task branches from the shared input; reuse W x + b.
      if (tasks_.empty()) {
        out.tasks[task] = base_shared;
      } else {
        out.tasks[task] = add(base_shared, scale(task_adapter(task).delta(x_shared), alpha_));
      }
      continue;
    }
    auto it = x_tasks->find(task);
    if (it == x_tasks->end()) {
      throw ConfigError("layer '" + name_ + "' got no input stream for task '" + task + "'");
    }
    const Tensor<T> base_task = base_forward(it->second);
    if (tasks_.empty()) {
      out.tasks[task] = base_task;
    } else {
      out.tasks[task] = add(base_task, scale(task_adapter(task).delta(it->second), alpha_));
    }
  }
  return out;
}

template <typename T>
Linear<T> MTLoRALinear<T>::merged(const std::optional<TaskId>& task) const {
  const LoRAAdapter<T>* ad = nullptr;
  if (task) {
    ad = &task_adapter(*task);
  } else if (shared_) {
    ad = &*shared_;
  }
  NoGradGuard no_grad;
  Linear<T> out;
  out.weight = Parameter<T>(base_.weight.name, base_.weight.value.clone(), false);
  if (base_.has_bias()) out.bias = Parameter<T>(base_.bias.name, base_.bias.value.clone(), false);
  if (ad == nullptr) return out;
  // Accumulate in double so the merged weight is the correctly rounded sum.
  const std::int64_t rows = d_out(), cols = d_in(), rank = ad->rank();
  const auto w = base_.weight.value.data();
  const auto a = ad->a.value.data();
  const auto b = ad->b.value.data();
  std::vector<T> merged_w(w.begin(), w.end());
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::int64_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < rank; ++k) {
        acc += static_cast<double>(b[i * rank + k]) * static_cast<double>(a[k * cols + j]);
      }
      merged_w[i * cols + j] =
          static_cast<T>(static_cast<double>(w[i * cols + j]) + static_cast<double>(alpha_) * acc);
    }
  }
  out.weight.value = Tensor<T>({rows, cols}, std::move(merged_w));
  return out;
}

template <typename T>
void MTLoRALinear<T>::merge_shared_in_place() {
  if (!shared_) return;
  const bool trainable = base_.weight.trainable();
  Linear<T> m = merged();
  base_.weight.value = m.weight.value;
  base_.weight.set_trainable(trainable);
  shared_.reset();
}

template struct Linear<float>;
template struct Linear<double>;
template struct Linear<long double>;
template struct LoRAAdapter<float>;
template struct LoRAAdapter<double>;
template struct LoRAAdapter<long double>;
template class MTLoRALinear<float>;
template class MTLoRALinear<double>;
template class MTLoRALinear<long double>;

}  // namespace mtlora
