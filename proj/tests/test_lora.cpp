// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <span>
#include <vector>

#include "doctest.h"
#include "mtlora/errors.hpp"
#include "mtlora/gradcheck.hpp"
#include "mtlora/lora.hpp"
#include "mtlora/ops.hpp"

using mtlora::ConfigError;
using mtlora::DimensionError;
using mtlora::MTLoRALinear;
using mtlora::Rng;
using mtlora::TaskId;
using mtlora::Tensor;

namespace {

template <typename T>
void set(mtlora::Parameter<T>& p, mtlora::Shape shape, std::vector<T> data) {
  const bool trainable = p.trainable();
  p.value = Tensor<T>(std::move(shape), std::move(data));
  p.set_trainable(trainable);
}

template <typename T>
void set(mtlora::Parameter<T>& p, mtlora::Shape shape, std::span<const T> data) {
  set(p, std::move(shape), std::vector<T>(data.begin(), data.end()));
}

template <typename T>
Tensor<T> random_tensor(mtlora::Shape shape, Rng rng, double bound = 1.0) {
  std::vector<T> data(static_cast<std::size_t>(mtlora::shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void randomize_b(mtlora::LoRAAdapter<T>& ad, Rng rng, double bound = 1.0) {
  set(ad.b, ad.b.value.shape(), random_tensor<T>(ad.b.value.shape(), rng, bound).data());
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

const std::vector<TaskId> kTwoTasks{"normals", "semseg"};

}  // namespace

TEST_CASE("shared adapter follows W x + b + alpha B A x") {
  MTLoRALinear<float> layer("l", 2, 2);
  layer.add_shared_adapter(1);
  set(layer.base().weight, {2, 2}, {1, 0, 0, 1});
  set(layer.shared().a, {1, 2}, {1, 0});
  set(layer.shared().b, {2, 1}, {1, 1});
  layer.set_alpha(1.0f);
  const auto y = layer.forward(Tensor<float>({2}, {1, 2}));
  CHECK(y.data()[0] == doctest::Approx(2));
  CHECK(y.data()[1] == doctest::Approx(3));

  SUBCASE("merged weights fold the adapter") {
    const auto m = layer.merged();
    CHECK(values(m.weight.value) == std::vector<float>{2, 0, 1, 1});
    const auto ym = m.forward(Tensor<float>({2}, {1, 2}));
    CHECK(values(ym) == values(y));
  }
  SUBCASE("alpha zero reproduces the base output exactly") {
    layer.set_alpha(0.0f);
    const Tensor<float> x({3, 2}, {0.3f, -1.7f, 2.5f, 0.1f, -0.4f, 9.0f});
    CHECK(bitwise_equal(layer.forward(x), layer.base_forward(x)));
  }
}

TEST_CASE("fresh adapters are transparent and bounded") {
  MTLoRALinear<float> layer("blk.fc1", 64, 48);
  layer.init_base(Rng(3));
  layer.add_shared_adapter(8);
  layer.add_task_adapters(kTwoTasks, 4);
  layer.init_adapters(Rng(11));

  const auto x = random_tensor<float>({5, 64}, Rng(99), 10.0);
  const auto base = layer.base_forward(x);
  CHECK(bitwise_equal(layer.forward(x), base));
  const auto multi = layer.forward_multi(x, nullptr, kTwoTasks);
  for (const auto& task : kTwoTasks) CHECK(bitwise_equal(multi.tasks.at(task), base));
  CHECK(bitwise_equal(multi.shared, base));

  float max_a = 0.0f;
  for (float v : layer.shared().a.value.data()) max_a = std::max(max_a, std::abs(v));
  for (const auto& [task, ad] : layer.task_adapters()) {
    for (float v : ad.a.value.data()) max_a = std::max(max_a, std::abs(v));
  }
  CHECK(max_a <= 0.125f);
  CHECK(max_a > 0.1f);

  MTLoRALinear<float> again("blk.fc1", 64, 48);
  again.add_shared_adapter(8);
  again.add_task_adapters(kTwoTasks, 4);
  again.init_adapters(Rng(11));
  CHECK(values(again.shared().a.value) == values(layer.shared().a.value));
  CHECK(values(again.task_adapters().at("semseg").a.value) == values(layer.task_adapters().at("semseg").a.value));
  CHECK(values(layer.task_adapters().at("semseg").a.value) != values(layer.task_adapters().at("normals").a.value));
}

TEST_CASE("task outputs use their own adapter on top of W x + b") {
  MTLoRALinear<float> layer("l", 2, 2, false);
  const std::vector<TaskId> one{"seg"};
  layer.add_task_adapters(one, 1);
  layer.set_alpha(2.0f);
  set(layer.task_adapters().at("seg").a, {1, 2}, {1, 1});
  set(layer.task_adapters().at("seg").b, {2, 1}, {1, 0});
  const auto out = layer.forward_multi(Tensor<float>({2}, {1, 3}), nullptr, one);
  CHECK(values(out.tasks.at("seg")) == std::vector<float>{8, 0});
  CHECK(values(out.shared) == std::vector<float>{0, 0});

  SUBCASE("second mode consumes per-task streams") {
    mtlora::TaskTensors<float> streams{{"seg", Tensor<float>({2}, {2, 0})}};
    const auto o2 = layer.forward_multi(Tensor<float>({2}, {1, 3}), &streams, one);
    CHECK(values(o2.tasks.at("seg")) == std::vector<float>{4, 0});
  }
  SUBCASE("missing adapter names the task") {
    const std::vector<TaskId> other{"depth"};
    try {
      layer.forward_multi(Tensor<float>({2}, {1, 3}), nullptr, other);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("depth") != std::string::npos);
    }
  }
  SUBCASE("merging a missing adapter is a configuration error") {
    CHECK_THROWS_AS(layer.merged(TaskId("depth")), ConfigError);
  }
}

TEST_CASE("identical task adapters on identical inputs agree") {
  MTLoRALinear<float> layer("l", 6, 5);
  layer.init_base(Rng(1));
  layer.add_task_adapters(kTwoTasks, 2);
  layer.init_adapters(Rng(2));
  randomize_b(layer.task_adapters().at("semseg"), Rng(5));
  auto& n = layer.task_adapters().at("normals");
  const auto& s = layer.task_adapters().at("semseg");
  set(n.a, s.a.value.shape(), s.a.value.data());
  set(n.b, s.b.value.shape(), s.b.value.data());
  const auto out = layer.forward_multi(random_tensor<float>({3, 6}, Rng(4)), nullptr, kTwoTasks);
  CHECK(bitwise_equal(out.tasks.at("semseg"), out.tasks.at("normals")));
}

TEST_CASE("rank and shape validation") {
  MTLoRALinear<float> layer("l", 4, 3);
  CHECK_THROWS_AS(layer.add_shared_adapter(4), ConfigError);
  CHECK_THROWS_AS(layer.add_shared_adapter(0), ConfigError);
  layer.add_shared_adapter(3);
  CHECK_THROWS_AS(layer.forward(Tensor<float>::zeros({2, 5})), DimensionError);
}

TEST_CASE("merge matches the adapted forward on random inputs") {
  MTLoRALinear<float> layer("l", 32, 24);
  layer.init_base(Rng(7));
  layer.add_shared_adapter(8);
  layer.add_task_adapters(kTwoTasks, 4);
  layer.init_adapters(Rng(8));
  layer.set_alpha(4.0f);
  // B at the magnitude adapters reach after training from zero.
  randomize_b(layer.shared(), Rng(9), 0.05);
  randomize_b(layer.task_adapters().at("semseg"), Rng(10), 0.05);

  const auto merged_shared = layer.merged();
  const auto merged_seg = layer.merged(TaskId("semseg"));
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto x = random_tensor<float>({32}, Rng(1000 + i), 10.0);
    const auto y = layer.forward(x);
    const auto ym = merged_shared.forward(x);
    const auto yt = layer.forward_multi(x, nullptr, kTwoTasks).tasks.at("semseg");
    const auto ytm = merged_seg.forward(x);
    for (std::int64_t j = 0; j < y.numel(); ++j) {
      worst = std::max(worst, static_cast<double>(std::abs(y.data()[j] - ym.data()[j])));
      worst = std::max(worst, static_cast<double>(std::abs(yt.data()[j] - ytm.data()[j])));
    }
  }
  CHECK(worst <= 1e-5);

  SUBCASE("zero B merges to W exactly") {
    const auto m = layer.merged(TaskId("normals"));
    CHECK(values(m.weight.value) == values(layer.base().weight.value));
  }
  SUBCASE("in-place merge drops the shared adapter") {
    const auto x = random_tensor<float>({4, 32}, Rng(55), 10.0);
    const auto before = layer.forward(x);
    layer.merge_shared_in_place();
    CHECK_FALSE(layer.has_shared());
    CHECK_FALSE(layer.base().weight.trainable());
    const auto after = layer.forward(x);
    for (std::int64_t j = 0; j < before.numel(); ++j) {
      CHECK(std::abs(before.data()[j] - after.data()[j]) <= 1e-5);
    }
  }
}

TEST_CASE("task adapter gradients stay within their task") {
  MTLoRALinear<float> layer("l", 6, 4);
  layer.init_base(Rng(1));
  layer.add_shared_adapter(2);
  layer.add_task_adapters(kTwoTasks, 2);
  layer.init_adapters(Rng(2));
  const auto out = layer.forward_multi(random_tensor<float>({3, 6}, Rng(3)), nullptr, kTwoTasks);
  mtlora::sum(out.tasks.at("semseg")).backward();
  CHECK(layer.task_adapters().at("semseg").b.value.has_grad());
  CHECK_FALSE(layer.task_adapters().at("normals").a.value.has_grad());
  CHECK_FALSE(layer.task_adapters().at("normals").b.value.has_grad());
  CHECK_FALSE(layer.shared().a.value.has_grad());
  CHECK_FALSE(layer.base().weight.value.has_grad());
}

TEST_CASE("layer gradients match finite differences in double precision") {
  MTLoRALinear<double> layer("l", 5, 4);
  layer.init_base(Rng(21));
  layer.add_shared_adapter(2);
  layer.add_task_adapters(kTwoTasks, 2);
  layer.init_adapters(Rng(22));
  layer.set_alpha(1.5);
  randomize_b(layer.shared(), Rng(23));
  randomize_b(layer.task_adapters().at("semseg"), Rng(24));
  randomize_b(layer.task_adapters().at("normals"), Rng(25));
  layer.base().bias.set_trainable(true);

  const auto x = random_tensor<double>({3, 5}, Rng(26));
  const auto tgt = random_tensor<double>({3, 4}, Rng(27));
  auto loss = [&] {
    const auto out = layer.forward_multi(x, nullptr, kTwoTasks);
    auto l = mtlora::sum(mtlora::mul(mtlora::sub(out.shared, tgt), mtlora::sub(out.shared, tgt)));
    for (const auto& [task, y] : out.tasks) l = mtlora::add(l, mtlora::sum(mtlora::mul(y, y)));
    return l;
  };
  std::vector<mtlora::Parameter<double>*> params{&layer.base().bias, &layer.shared().a,
                                                 &layer.shared().b};
  for (auto& [task, ad] : layer.task_adapters()) {
    params.push_back(&ad.a);
    params.push_back(&ad.b);
  }
  const auto r = mtlora::grad_check(loss, params);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error <= 1e-6);
}
