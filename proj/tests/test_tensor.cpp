// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "mtlora/errors.hpp"
#include "mtlora/gradcheck.hpp"
#include "mtlora/ops.hpp"
#include "mtlora/rng.hpp"

using namespace mtlora;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

TD random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD(std::move(shape), std::move(v), requires_grad);
}

Shape random_shape(Rng& rng, int rank, int max_numel = 32) {
  for (;;) {
    Shape s;
    for (int i = 0; i < rank; ++i) s.push_back(1 + static_cast<std::int64_t>(rng.below(4)));
    if (shape_numel(s) <= max_numel) return s;
  }
}

// Contracts op output against fixed random weights so every output element
// contributes a distinct gradient.
double check_op(Rng& rng, std::vector<Parameter<double>> inputs,
                const std::function<TD(const std::vector<Parameter<double>>&)>& op) {
  const TD probe = op(inputs);
  const TD weights = random_tensor(rng, probe.shape(), false);
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : inputs) ptrs.push_back(&p);
  auto f = [&] { return sum(mul(op(inputs), weights)); };
  return grad_check(f, ptrs).max_rel_error;
}

}  // namespace

TEST_CASE("matmul examples") {
  TD eye({2, 2}, {1, 0, 0, 1});
  TD m({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});

  TD row({1, 2}, {1, 2});
  TD col({2, 1}, {3, 4});
  CHECK(matmul(row, col).data()[0] == 11.0);

  TD a({2, 2}, {1, 2, 3, 4}, true);
  TD b({2, 2}, {1, 0, 0, 1});
  sum(matmul(a, b)).backward();
  REQUIRE(a.has_grad());
  for (double g : a.grad()) CHECK(g == 1.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  TD a = TD::zeros({2, 3});
  TD b = TD::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(2, 2)") != std::string::npos);
  }
}

TEST_CASE("matmul broadcasts batch axes") {
  Rng rng(3);
  TD a = random_tensor(rng, {2, 3, 2, 4});
  TD b = random_tensor(rng, {3, 4, 5});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 2, 5});
  // Brute-force one element.
  double expect = 0;
  for (int k = 0; k < 4; ++k) expect += a.data()[((1 * 3 + 2) * 2 + 1) * 4 + k] * b.data()[(2 * 4 + k) * 5 + 3];
  CHECK(c.data()[((1 * 3 + 2) * 2 + 1) * 5 + 3] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("softmax examples") {
  auto s = softmax_lastdim(TD({2}, {0, 0}));
  CHECK(s.data()[0] == 0.5);
  CHECK(s.data()[1] == 0.5);
  auto big = softmax_lastdim(TD({2}, {1000, 1000}));
  CHECK(big.data()[0] == 0.5);
  auto t = softmax_lastdim(TD({2}, {0, std::log(3.0)}));
  CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("layer_norm examples") {
  TD ones = TD::full({3}, 1.0);
  TD zeros = TD::zeros({3});
  auto c = layer_norm(TD({3}, {1, 1, 1}), ones, zeros, 1e-5);
  for (double v : c.data()) CHECK(v == 0.0);
  auto d = layer_norm(TD({2}, {0, 2}), TD::full({2}, 1.0), TD::zeros({2}), 1e-15);
  CHECK(d.data()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(d.data()[1] == doctest::Approx(1.0).epsilon(1e-9));
  auto e = layer_norm(TD({2}, {3, -7}), TD::zeros({2}), TD({2}, {5, 5}), 1e-5);
  CHECK(e.data()[0] == 5.0);
  CHECK(e.data()[1] == 5.0);
}

TEST_CASE("softmax and layer_norm row statistics") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    TF x({4, 7}, [&] {
      std::vector<float> v(28);
      for (auto& f : v) f = static_cast<float>(rng.uniform(-20, 20));
      return v;
    }());
    auto s = softmax_lastdim(x);
    auto ln = layer_norm(x, TF::full({7}, 1.f), TF::zeros({7}), 1e-5f);
    for (int r = 0; r < 4; ++r) {
      double total = 0, mu = 0, var = 0;
      for (int i = 0; i < 7; ++i) {
        total += s.data()[r * 7 + i];
        mu += ln.data()[r * 7 + i];
      }
      mu /= 7;
      for (int i = 0; i < 7; ++i) var += (ln.data()[r * 7 + i] - mu) * (ln.data()[r * 7 + i] - mu);
      var /= 7;
      CHECK(std::abs(total - 1.0) <= 1e-6);
      CHECK(std::abs(mu) <= 1e-6);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
  }
}

namespace {
// Independent half-pixel sampler: evaluates the piecewise-linear interpolant
// through the input samples at output pixel centres.
double resample_1d(const std::vector<double>& in, std::size_t out_n, std::size_t o) {
  const double n = static_cast<double>(in.size());
  double pos = (static_cast<double>(o) + 0.5) * n / static_cast<double>(out_n) - 0.5;
  pos = std::clamp(pos, 0.0, n - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= in.size()) return in.back();
  const double t = pos - static_cast<double>(i);
  return in[i] * (1 - t) + in[i + 1] * t;
}
}  // namespace

TEST_CASE("bilinear_resize examples") {
  Rng rng(5);
  TD x = random_tensor(rng, {2, 3, 5}, false);
  auto same = bilinear_resize(x, 3, 5);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));

  auto filled = bilinear_resize(TD({1, 1, 1}, {2.5}), 4, 3);
  for (double v : filled.data()) CHECK(v == 2.5);

  auto up = bilinear_resize(TD({1, 1, 2}, {0, 1}), 1, 4);
  const std::vector<double> in{0, 1};
  for (std::size_t o = 0; o < 4; ++o) CHECK(up.data()[o] == doctest::Approx(resample_1d(in, 4, o)));
  // Half-pixel convention with edge clamping gives 0, .25, .75, 1.
  CHECK(up.data()[0] == 0.0);
  CHECK(up.data()[1] == doctest::Approx(0.25));
  CHECK(up.data()[2] == doctest::Approx(0.75));
  CHECK(up.data()[3] == 1.0);
}

TEST_CASE("backward examples") {
  TD p({3}, {0.5, -1, 2}, true);
  sum(p).backward();
  for (double g : p.grad()) CHECK(g == 1.0);

  TD p2({3}, {1, 2, 3}, true);
  TD q = TD({3}, {4, 5, 6}, true).detach();
  sum(mul(p2, q)).backward();
  CHECK(p2.has_grad());
  CHECK_FALSE(q.has_grad());

  TD p3({1}, {3}, true);
  auto d = add_scalar(p3, -2.0);
  sum(mul(d, d)).backward();
  CHECK(p3.grad()[0] == 2.0);
}

TEST_CASE("backward usage errors") {
  TD leaf({1}, {1}, true);
  CHECK_THROWS_AS(leaf.backward(), UsageError);
  TD v({2}, {1, 2}, true);
  CHECK_THROWS_AS(scale(v, 2.0).backward(), UsageError);
  auto loss = sum(scale(v, 2.0));
  loss.backward();
  CHECK_FALSE(loss.has_tape());
  CHECK_THROWS_AS(loss.backward(), UsageError);
}

TEST_CASE("unreachable parameters stay without gradient") {
  TD used({2}, {1, 2}, true);
  TD unused({2}, {3, 4}, true);
  sum(used).backward();
  CHECK(used.has_grad());
  CHECK_FALSE(unused.has_grad());
}

TEST_CASE("no-grad guard suppresses tape") {
  TD p({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(p);
  CHECK_FALSE(y.has_tape());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check examples") {
  Parameter<double> p("p", TD({3}, {1, 2, 3}));
  std::vector<Parameter<double>*> ps{&p};
  auto r1 = grad_check([&] { return sum(p.value); }, ps);
  CHECK(r1.max_rel_error == doctest::Approx(0.0).epsilon(1e-10));
  auto r2 = grad_check([&] { return sum(mul(p.value, p.value)); }, ps);
  CHECK(r2.max_rel_error <= 1e-9);
  CHECK_THROWS_AS(grad_check([&] { return scale(p.value, 1.0); }, ps), UsageError);
}

TEST_CASE("finite-difference property over every differentiable op") {
  Rng rng(2026);
  using Ps = std::vector<Parameter<double>>;
  auto param = [&](const char* name, Shape s) { return Parameter<double>(name, random_tensor(rng, std::move(s))); };
  double worst = 0;
  int call = 0;
  int worst_call = -1;
  auto track = [&](double err) {
    if (err > worst) {
      worst = err;
      worst_call = call % 16;
    }
    ++call;
  };
  for (int trial = 0; trial < 20; ++trial) {
    Shape s = random_shape(rng, 1 + static_cast<int>(rng.below(3)));
    Shape tail(s.end() - 1, s.end());
    track(check_op(rng, Ps{param("a", s), param("b", s)},
                                     [](const Ps& p) { return add(p[0].value, p[1].value); }));
    track(check_op(rng, Ps{param("a", s), param("b", tail)},
                                     [](const Ps& p) { return sub(p[0].value, p[1].value); }));
    track(check_op(rng, Ps{param("a", s), param("b", tail)},
                                     [](const Ps& p) { return mul(p[0].value, p[1].value); }));
    track(check_op(rng, Ps{param("a", s)},
                                     [](const Ps& p) { return scale(p[0].value, -1.7); }));
    track(check_op(rng, Ps{param("a", s)},
                                     [](const Ps& p) { return softmax_lastdim(p[0].value); }));
    track(check_op(rng, Ps{param("a", s)},
                                     [](const Ps& p) { return gelu(p[0].value); }));
    // Width-2 rows saturate to +-1 with ~1e-7 gradients, below what central
    // differences resolve, so layer_norm draws rows of width >= 3.
    Shape ln_shape = s;
    ln_shape.back() = 3 + static_cast<std::int64_t>(rng.below(2));
    Shape ln_tail{ln_shape.back()};
    track(check_op(rng, Ps{param("x", ln_shape), param("g", ln_tail), param("b", ln_tail)},
                                     [](const Ps& p) {
                                       return layer_norm(p[0].value, p[1].value, p[2].value, 1e-5);
                                     }));

    const auto m = 1 + static_cast<std::int64_t>(rng.below(3));
    const auto k = 1 + static_cast<std::int64_t>(rng.below(3));
    const auto n = 1 + static_cast<std::int64_t>(rng.below(3));
    track(check_op(rng, Ps{param("a", {2, m, k}), param("b", {k, n})},
                                     [](const Ps& p) { return matmul(p[0].value, p[1].value); }));
    track(check_op(rng, Ps{param("x", {m, k}), param("w", {n, k}), param("b", {n})},
                                     [](const Ps& p) {
                                       return linear(p[0].value, p[1].value, p[2].value);
                                     }));
    track(check_op(rng, Ps{param("a", {2, m, k})},
                                     [](const Ps& p) { return permute(p[0].value, {2, 0, 1}); }));
    track(check_op(rng, Ps{param("a", {2, m, k})},
                                     [](const Ps& p) { return select(p[0].value, 1); }));
    track(check_op(rng, Ps{param("a", {m, 4})}, [](const Ps& p) {
      const std::vector<std::int64_t> idx{3, 0, 0, 2, 1};
      return gather_lastdim(p[0].value, idx);
    }));
    const auto h = 1 + static_cast<std::int64_t>(rng.below(3));
    const auto w = 1 + static_cast<std::int64_t>(rng.below(3));
    const auto oh = 1 + static_cast<std::int64_t>(rng.below(5));
    const auto ow = 1 + static_cast<std::int64_t>(rng.below(5));
    track(check_op(rng, Ps{param("a", {2, h, w})}, [oh, ow](const Ps& p) {
      return bilinear_resize(p[0].value, oh, ow);
    }));
    track(check_op(rng, Ps{param("img", {1, 2, 4, 4})},
                                     [](const Ps& p) { return patchify(p[0].value, 2); }));
    track(check_op(rng, Ps{param("tok", {1, 4, 3})},
                                     [](const Ps& p) { return merge_2x2(p[0].value, 2, 2); }));
    track(check_op(rng, Ps{param("a", s)},
                                     [](const Ps& p) { return reshape(mean(p[0].value), Shape{1}); }));
  }
  INFO("worst op index within a trial: ", worst_call);
  CHECK(worst <= 1e-6);
}

TEST_CASE("patch layout") {
  // 8x8 single-channel image with value = pixel index; patch 4 gives a 2x2
  // token grid in row-major order.
  std::vector<double> v(64);
  for (int i = 0; i < 64; ++i) v[i] = i;
  auto tokens = patchify(TD({1, 1, 8, 8}, v), 4);
  CHECK(tokens.shape() == Shape{1, 4, 16});
  CHECK(tokens.data()[0 * 16] == 0);   // top-left patch origin (0,0)
  CHECK(tokens.data()[1 * 16] == 4);   // (0,4)
  CHECK(tokens.data()[2 * 16] == 32);  // (4,0)
  CHECK(tokens.data()[3 * 16] == 36);  // (4,4)
  CHECK(tokens.data()[1 * 16 + 5] == 13);  // row 1, col 1 inside patch (0,4)

  std::vector<double> t(4);
  for (int i = 0; i < 4; ++i) t[i] = i;
  auto merged = merge_2x2(TD({1, 4, 1}, t), 2, 2);
  CHECK(merged.shape() == Shape{1, 1, 4});
  CHECK(std::vector<double>(merged.data().begin(), merged.data().end()) ==
        std::vector<double>{0, 2, 1, 3});
  CHECK_THROWS_AS(merge_2x2(TD::zeros({1, 6, 1}), 3, 2), DimensionError);
  CHECK_THROWS_AS(patchify(TD::zeros({1, 1, 6, 8}), 4), DimensionError);
}

TEST_CASE("flop counter tallies linear and matmul") {
  FlopScope scope;
  linear(TF::zeros({5, 3}), TF::zeros({4, 3}), TF());
  matmul(TF::zeros({2, 3, 4}), TF::zeros({4, 6}));
  CHECK(scope.flops() == 2u * 5 * 3 * 4 + 2u * 2 * 3 * 4 * 6);
}

TEST_CASE("determinism of forward results") {
  auto run = [] {
    Rng rng(99);
    TF x({3, 8}, [&] {
      std::vector<float> v(24);
      for (auto& f : v) f = static_cast<float>(rng.normal());
      return v;
    }());
    return softmax_lastdim(gelu(layer_norm(x, TF::full({8}, 1.f), TF::zeros({8}), 1e-5f)));
  };
  auto a = run();
  auto b = run();
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}
