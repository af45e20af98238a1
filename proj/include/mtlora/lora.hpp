// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlora/parameter.hpp"
#include "mtlora/rng.hpp"

namespace mtlora {

// Tasks are identified by name; std::map keeps them in lexicographic order.
using TaskId = std::string;

template <typename T>
using TaskTensors = std::map<TaskId, Tensor<T>>;

// Plain affine layer y = x W^T + b.
template <typename T>
struct Linear {
  Parameter<T> weight;  // [d_out, d_in]
  Parameter<T> bias;    // [d_out]; undefined tensor when the layer has no bias

  Linear() = default;
  Linear(const std::string& name, std::int64_t d_in, std::int64_t d_out, bool with_bias = true);

  std::int64_t d_in() const { return weight.value.dim(1); }
  std::int64_t d_out() const { return weight.value.dim(0); }
  bool has_bias() const { return bias.value.defined(); }

  // W ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), b = 0.
  void init(const Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
};

// Low-rank pair contributing alpha * B (A x). A: [rank, d_in], B: [d_out, rank].
template <typename T>
struct LoRAAdapter {
  Parameter<T> a;
  Parameter<T> b;

  std::int64_t rank() const { return a.value.dim(0); }
  Tensor<T> delta(const Tensor<T>& x) const;
};

template <typename T>
struct MultiOutput {
  Tensor<T> shared;
  TaskTensors<T> tasks;
};

// Frozen base linear with an optional task-agnostic adapter and optional
// per-task adapters. Task outputs use W x + b plus their own adapter only;
// the shared adapter feeds the shared stream.
template <typename T>
class MTLoRALinear {
 public:
  MTLoRALinear() = default;
  MTLoRALinear(std::string name, std::int64_t d_in, std::int64_t d_out, bool with_bias = true);

  void add_shared_adapter(std::int64_t rank);
  void add_task_adapters(std::span<const TaskId> tasks, std::int64_t rank);
  void drop_shared_adapter() { shared_.reset(); }
  void set_alpha(T alpha) { alpha_ = alpha; }

  void init_base(const Rng& rng) { base_.init(rng.fork(name_ + ".base")); }
  // A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0 for the shared and every task
  // adapter, so the adapted layer starts out identical to the base layer.
  void init_adapters(const Rng& rng);

  Tensor<T> base_forward(const Tensor<T>& x) const;
  // W x + b + alpha * B (A x) with the shared adapter when present.
  Tensor<T> forward(const Tensor<T>& x) const;
  // Without x_tasks every task branches from x_shared; with x_tasks each task
  // consumes its own stream. Layers without task adapters pass the base
  // output through for each task.
  MultiOutput<T> forward_multi(const Tensor<T>& x_shared, const TaskTensors<T>* x_tasks,
                               std::span<const TaskId> tasks) const;

  // W' = W + alpha * B A for the shared adapter (nullopt) or one task.
  Linear<T> merged(const std::optional<TaskId>& task = std::nullopt) const;
  // Folds the shared adapter into W and removes it.
  void merge_shared_in_place();

  const std::string& name() const { return name_; }
  std::int64_t d_in() const { return base_.d_in(); }
  std::int64_t d_out() const { return base_.d_out(); }
  T alpha() const { return alpha_; }
  Linear<T>& base() { return base_; }
  const Linear<T>& base() const { return base_; }
  bool has_shared() const { return shared_.has_value(); }
  LoRAAdapter<T>& shared() { return *shared_; }
  const LoRAAdapter<T>& shared() const { return *shared_; }
  const std::map<TaskId, LoRAAdapter<T>>& task_adapters() const { return tasks_; }
  std::map<TaskId, LoRAAdapter<T>>& task_adapters() { return tasks_; }

 private:
  LoRAAdapter<T> make_adapter(const std::string& prefix, std::int64_t rank) const;
  const LoRAAdapter<T>& task_adapter(const TaskId& task) const;

  std::string name_;
  Linear<T> base_;
  std::optional<LoRAAdapter<T>> shared_;
  std::map<TaskId, LoRAAdapter<T>> tasks_;
  T alpha_ = T(4);
};

extern template struct Linear<float>;
extern template struct Linear<double>;
extern template struct Linear<long double>;
extern template class MTLoRALinear<float>;
extern template class MTLoRALinear<double>;
extern template class MTLoRALinear<long double>;

}  // namespace mtlora
