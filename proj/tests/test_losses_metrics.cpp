// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "mtlora/errors.hpp"
#include "mtlora/gradcheck.hpp"
#include "mtlora/losses.hpp"
#include "mtlora/metrics.hpp"
#include "mtlora/parameter.hpp"
#include "mtlora/rng.hpp"

using mtlora::Tensor;

namespace {

// Task order for the paper's table rows: semseg, human parts, saliency, normals.
const std::map<std::string, double> kSingleTask{
    {"semseg", 67.21}, {"parts", 61.93}, {"saliency", 62.35}, {"normals", 17.97}};
const std::map<std::string, bool> kLower{
    {"semseg", false}, {"parts", false}, {"saliency", false}, {"normals", true}};

std::map<std::string, double> row(double s, double p, double sal, double n) {
  return {{"semseg", s}, {"parts", p}, {"saliency", sal}, {"normals", n}};
}

std::vector<double> random_values(std::size_t n, mtlora::Rng rng, double bound) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace

TEST_CASE("cross entropy vanishes with a wide margin and shrinks as the margin grows") {
  const std::vector<std::uint8_t> labels{0, 2, 1, 2};
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 20.0}) {
    std::vector<double> z(3 * 4, 0.0);
    for (std::size_t q = 0; q < 4; ++q) z[labels[q] * 4 + q] = margin;
    const double ce = mtlora::cross_entropy(Tensor<double>({1, 3, 2, 2}, z), labels).item();
    CHECK(ce < prev);
    prev = ce;
  }
  CHECK(prev <= 1e-6);
}

TEST_CASE("cross entropy matches a direct log-softmax") {
  const std::int64_t b = 2, k = 4, hw = 6;
  const auto z = random_values(static_cast<std::size_t>(b * k * hw), mtlora::Rng(3), 3.0);
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(b * hw));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>((i * 7) % k);
  double expected = 0.0;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t q = 0; q < hw; ++q) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < k; ++c) sum += std::exp(z[static_cast<std::size_t>((n * k + c) * hw + q)]);
      const auto y = labels[static_cast<std::size_t>(n * hw + q)];
      expected += std::log(sum) - z[static_cast<std::size_t>((n * k + y) * hw + q)];
    }
  }
  expected /= static_cast<double>(b * hw);
  const double got = mtlora::cross_entropy(Tensor<double>({b, k, 2, 3}, z), labels).item();
  CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cross entropy rejects labels outside the class range") {
  const std::vector<std::uint8_t> labels{0, 3};
  CHECK_THROWS_AS(mtlora::cross_entropy(Tensor<float>({1, 3, 1, 2}, std::vector<float>(6, 0.f)), labels),
                  mtlora::DomainError);
}

TEST_CASE("l1 on normals is zero when the prediction equals the target") {
  // Two pixels with unit normals.
  const float s = 1.0f / std::sqrt(3.0f);
  const std::vector<float> target{0.f, s, 0.f, s, 1.f, s};
  const std::vector<double> pred(target.begin(), target.end());
  CHECK(mtlora::normals_l1(Tensor<double>({1, 3, 1, 2}, pred), target).item() ==
        doctest::Approx(0.0).epsilon(1e-7));
  // Scaling the prediction does not change the loss.
  std::vector<double> scaled(pred);
  for (auto& v : scaled) v *= 5.0;
  CHECK(mtlora::normals_l1(Tensor<double>({1, 3, 1, 2}, scaled), target).item() ==
        doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("balanced bce with half positives at zero logits is log 2") {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 0, 1};
  const double l = mtlora::balanced_bce(Tensor<double>({1, 1, 2, 3}, std::vector<double>(6, 0.0)), y).item();
  CHECK(l == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(l == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("balanced bce matches the weighted formula on an imbalanced batch") {
  const std::vector<std::uint8_t> y{1, 0, 0, 0, 0, 1, 0, 0};
  const auto z = random_values(8, mtlora::Rng(11), 4.0);
  const double n = 8, np = 2, nn = 6;
  double expected = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const double p = std::clamp(1.0 / (1.0 + std::exp(-z[i])), 1e-6, 1 - 1e-6);
    expected += y[i] ? n / (2 * np) * std::log(p) : n / (2 * nn) * std::log(1 - p);
  }
  expected = -expected / n;
  const double got = mtlora::balanced_bce(Tensor<double>({2, 1, 2, 2}, z), y).item();
  CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("balanced bce falls back to plain bce on a single-class batch") {
  const std::vector<std::uint8_t> y{1, 1, 1, 1};
  const std::vector<double> z{0.5, -1.0, 2.0, 0.0};
  double expected = 0.0;
  for (double v : z) expected -= std::log(1.0 / (1.0 + std::exp(-v)));
  expected /= 4.0;
  CHECK(mtlora::balanced_bce(Tensor<double>({1, 1, 2, 2}, z), y).item() ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("loss gradients agree with central differences") {
  mtlora::Parameter<double> logits("z", Tensor<double>({2, 3, 2, 2}, random_values(24, mtlora::Rng(5), 2.0)));
  const std::vector<std::uint8_t> labels{0, 1, 2, 1, 2, 2, 0, 1};
  auto ce = mtlora::grad_check([&] { return mtlora::cross_entropy(logits.value, labels); }, {&logits});
  CHECK(ce.max_rel_error <= 1e-7);

  mtlora::Parameter<double> sal("s", Tensor<double>({2, 1, 2, 2}, random_values(8, mtlora::Rng(6), 2.0)));
  const std::vector<std::uint8_t> y{1, 0, 0, 1, 0, 0, 0, 1};
  auto bce = mtlora::grad_check([&] { return mtlora::balanced_bce(sal.value, y); }, {&sal});
  CHECK(bce.max_rel_error <= 1e-7);

  mtlora::Parameter<double> nrm("n", Tensor<double>({1, 3, 2, 2}, random_values(12, mtlora::Rng(7), 1.0)));
  std::vector<float> target(12);
  for (std::size_t q = 0; q < 4; ++q) {
    target[q] = 0.6f;
    target[4 + q] = 0.0f;
    target[8 + q] = 0.8f;
  }
  auto l1 = mtlora::grad_check([&] { return mtlora::normals_l1(nrm.value, target); }, {&nrm});
  CHECK(l1.max_rel_error <= 1e-6);
}

TEST_CASE("weighted multi-task loss") {
  std::map<std::string, Tensor<double>> losses{{"a", Tensor<double>::scalar(0.5)},
                                               {"b", Tensor<double>::scalar(0.25)}};
  CHECK(mtlora::mtl_loss(losses, {{"a", 1.0}, {"b", 1.0}}).item() == doctest::Approx(0.75));
  losses = {{"a", Tensor<double>::scalar(0.1)}, {"b", Tensor<double>::scalar(0.2)}};
  CHECK(mtlora::mtl_loss(losses, {{"a", 1.0}, {"b", 2.0}}).item() == doctest::Approx(0.5));
  CHECK_THROWS_AS(mtlora::mtl_loss(losses, {{"a", 1.0}}), mtlora::ConfigError);
}

TEST_CASE("mIoU by direct counting") {
  mtlora::ConfusionMatrix cm(2);
  const std::vector<std::uint8_t> pred{1, 1, 0, 0}, gt{1, 0, 0, 0};
  cm.add(pred, gt);
  CHECK(cm.miou() == doctest::Approx(7.0 / 12.0).epsilon(1e-12));

  mtlora::ConfusionMatrix perfect(4);
  const std::vector<std::uint8_t> labels{0, 3, 3, 1};
  perfect.add(labels, labels);
  CHECK(perfect.miou() == 1.0);  // class 2 is absent from both and excluded
}

TEST_CASE("angular rmse is zero on a match and 90 degrees when orthogonal") {
  const std::vector<float> gt{0, 0, 0, 0, 1, 1};  // two pixels pointing along z
  mtlora::AngularError same;
  same.add(gt, gt, 2);
  CHECK(same.rmse() == doctest::Approx(0.0).epsilon(1e-6));
  mtlora::AngularError ortho;
  const std::vector<float> pred{3, 0, 0, -2, 0, 0};  // x and -y, unnormalized
  ortho.add(pred, gt, 2);
  CHECK(ortho.rmse() == doctest::Approx(90.0).epsilon(1e-9));
}

TEST_CASE("delta_m reproduces published table rows") {
  CHECK(mtlora::delta_m(kSingleTask, kSingleTask, kLower) == 0.0);
  CHECK(std::abs(mtlora::delta_m(row(65.09, 53.48, 57.46, 20.69), kSingleTask, kLower) + 9.95) <= 0.05);
  CHECK(std::abs(mtlora::delta_m(row(67.9, 59.84, 65.40, 16.60), kSingleTask, kLower) - 2.55) <= 0.05);
  CHECK(std::abs(mtlora::delta_m(row(67.56, 60.24, 65.21, 16.64), kSingleTask, kLower) - 2.23) <= 0.25);
}

TEST_CASE("delta_m errors and antisymmetry") {
  CHECK_THROWS_AS(mtlora::delta_m({{"a", 1.0}}, {{"a", 0.0}}, {{"a", false}}), mtlora::DomainError);
  CHECK_THROWS_AS(mtlora::delta_m({{"a", 1.0}}, {{"b", 1.0}}, {}), mtlora::ConfigError);
  for (double rel : {1e-3, -5e-4, 2e-4}) {
    const double m = 0.6, ms = m * (1 + rel);
    const double fwd = mtlora::delta_m({{"a", m}}, {{"a", ms}}, {{"a", false}});
    const double back = mtlora::delta_m({{"a", ms}}, {{"a", m}}, {{"a", false}});
    // Antisymmetric to first order; the residual is the quadratic term.
    CHECK(std::abs(fwd + back) <= 100.0 * rel * rel * 1.01 + 1e-6);
    CHECK(std::abs(fwd / 100.0 + back / 100.0) <= 1e-6);
  }
}
