// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <type_traits>
#include <vector>

#include "autograd.hpp"
#include "mtlora/errors.hpp"
#include "mtlora/log.hpp"
#include "mtlora/ops.hpp"

namespace mtlora {

using detail::make_output;
using detail::TensorImpl;

namespace {

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

// Reductions run in double, or wider when T is.
template <typename T>
using Acc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

void check_dense(const char* what, const Shape& shape, std::int64_t channels) {
  if (shape.size() != 4 || (channels > 0 && shape[1] != channels)) {
    throw DimensionError(std::string(what) + ": expected [B, " +
                         (channels > 0 ? std::to_string(channels) : std::string("K")) +
                         ", H, W], got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  using A = Acc<T>;
  check_dense("cross_entropy", logits.shape(), 0);
  const std::int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != b * hw) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  const auto z = logits.data();
  auto probs = std::make_shared<Buffer<T>>(z.size());
  A total = 0.0;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const T* zp = z.data() + n * k * hw + p;
      T* pp = probs->data() + n * k * hw + p;
      const std::int64_t y = labels[sz(n * hw + p)];
      if (y >= k) {
        throw DomainError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(k) + ")");
      }
      T mx = zp[0];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, zp[c * hw]);
      A s = 0.0;
      for (std::int64_t c = 0; c < k; ++c) {
        pp[c * hw] = std::exp(zp[c * hw] - mx);
        s += static_cast<A>(pp[c * hw]);
      }
      const T inv = static_cast<T>(1.0 / s);
      for (std::int64_t c = 0; c < k; ++c) pp[c * hw] *= inv;
      total += std::log(s) + static_cast<A>(mx) - static_cast<A>(zp[y * hw]);
    }
  }
  const A count = static_cast<A>(b * hw);
  std::vector<std::uint8_t> y(labels.begin(), labels.end());
  auto zi = logits.impl();
  return make_output<T>(
      Shape{}, Buffer<T>{static_cast<T>(total / count)}, {&logits},
      [zi, probs, y = std::move(y), b, k, hw, count](const TensorImpl<T>& res) {
        T* g = zi->grad_buffer().data();
        const T scale = static_cast<T>(static_cast<A>(res.grad[0]) / count);
        for (std::int64_t n = 0; n < b; ++n) {
          for (std::int64_t c = 0; c < k; ++c) {
            const std::int64_t base = (n * k + c) * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
              const T onehot = y[sz(n * hw + p)] == c ? T(1) : T(0);
              g[base + p] += scale * ((*probs)[sz(base + p)] - onehot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> normals_l1(const Tensor<T>& pred, std::span<const float> target) {
  using A = Acc<T>;
  check_dense("normals_l1", pred.shape(), 3);
  if (static_cast<std::int64_t>(target.size()) != pred.numel()) {
    throw DimensionError("normals_l1: target has " + std::to_string(target.size()) +
                         " values for prediction " + shape_str(pred.shape()));
  }
  const std::int64_t b = pred.dim(0), hw = pred.dim(2) * pred.dim(3);
  const auto p = pred.data();
  // Per pixel: unit vector and inverse norm, reused in backward.
  auto unit = std::make_shared<Buffer<T>>(p.size());
  auto inv_norm = std::make_shared<Buffer<T>>(sz(b * hw));
  A total = 0.0;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t q = 0; q < hw; ++q) {
      const std::int64_t i0 = n * 3 * hw + q;
      A ss = 0.0;
      for (int c = 0; c < 3; ++c) {
        const A v = static_cast<A>(p[sz(i0 + c * hw)]);
        ss += v * v;
      }
      const A inv = 1.0 / std::max(std::sqrt(ss), A(1e-12));
      (*inv_norm)[sz(n * hw + q)] = static_cast<T>(inv);
      for (int c = 0; c < 3; ++c) {
        const std::size_t i = sz(i0 + c * hw);
        const T u = static_cast<T>(static_cast<A>(p[i]) * inv);
        (*unit)[i] = u;
        total += std::abs(static_cast<A>(u) - static_cast<A>(target[i]));
      }
    }
  }
  const A count = static_cast<A>(pred.numel());
  std::vector<float> tgt(target.begin(), target.end());
  auto pi = pred.impl();
  return make_output<T>(
      Shape{}, Buffer<T>{static_cast<T>(total / count)}, {&pred},
      [pi, unit, inv_norm, tgt = std::move(tgt), b, hw, count](const TensorImpl<T>& res) {
        T* g = pi->grad_buffer().data();
        const T scale = static_cast<T>(static_cast<A>(res.grad[0]) / count);
        for (std::int64_t n = 0; n < b; ++n) {
          for (std::int64_t q = 0; q < hw; ++q) {
            const std::int64_t i0 = n * 3 * hw + q;
            T s[3];
            T dot = 0;
            for (int c = 0; c < 3; ++c) {
              const std::size_t i = sz(i0 + c * hw);
              const T diff = (*unit)[i] - static_cast<T>(tgt[i]);
              s[c] = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
              dot += s[c] * (*unit)[i];
            }
            // d(p/|p|)/dp = (I - u u^T) / |p|
            const T inv = (*inv_norm)[sz(n * hw + q)];
            for (int c = 0; c < 3; ++c) {
              const std::size_t i = sz(i0 + c * hw);
              g[i] += scale * inv * (s[c] - dot * (*unit)[i]);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> balanced_bce(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  using A = Acc<T>;
  check_dense("balanced_bce", logits.shape(), 1);
  const std::int64_t n = logits.numel();
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw DimensionError("balanced_bce: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  std::int64_t pos = 0;
  for (auto v : labels) {
    if (v > 1) throw DomainError("balanced_bce: labels must be 0 or 1");
    pos += v;
  }
  const std::int64_t neg = n - pos;
  A w_pos = 1.0, w_neg = 1.0;
  if (pos == 0 || neg == 0) {
    log::warning("balanced_bce: batch has a single class; using unweighted BCE");
  } else {
    w_pos = static_cast<A>(n) / (2.0 * static_cast<A>(pos));
    w_neg = static_cast<A>(n) / (2.0 * static_cast<A>(neg));
  }
  constexpr A kLo = 1e-6, kHi = 1.0 - 1e-6;
  const auto z = logits.data();
  auto dz = std::make_shared<Buffer<T>>(sz(n));
  A total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const A zi = static_cast<A>(z[sz(i)]);
    const A sig = 1.0 / (1.0 + std::exp(-zi));
    const bool clamped = sig < kLo || sig > kHi;
    const A p = std::clamp(sig, kLo, kHi);
    if (labels[sz(i)]) {
      total -= w_pos * std::log(p);
      (*dz)[sz(i)] = clamped ? T(0) : static_cast<T>(-w_pos * (1.0 - sig));
    } else {
      total -= w_neg * std::log(1.0 - p);
      (*dz)[sz(i)] = clamped ? T(0) : static_cast<T>(w_neg * sig);
    }
  }
  const A count = static_cast<A>(n);
  auto zi = logits.impl();
  return make_output<T>(Shape{}, Buffer<T>{static_cast<T>(total / count)}, {&logits},
                        [zi, dz, count](const TensorImpl<T>& res) {
                          T* g = zi->grad_buffer().data();
                          const T scale = static_cast<T>(static_cast<A>(res.grad[0]) / count);
                          for (std::size_t i = 0; i < dz->size(); ++i) g[i] += scale * (*dz)[i];
                        });
}

template <typename T>
Tensor<T> mtl_loss(const std::map<TaskId, Tensor<T>>& losses,
                   const std::map<TaskId, double>& weights) {
  Tensor<T> total;
  for (const auto& [task, loss] : losses) {
    auto it = weights.find(task);
    if (it == weights.end()) throw ConfigError("no loss weight for task '" + task + "'");
    const auto term = scale(loss, static_cast<T>(it->second));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) throw UsageError("mtl_loss needs at least one task loss");
  return total;
}

#define MTLORA_INSTANTIATE_LOSSES(T)                                                          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::uint8_t>);         \
  template Tensor<T> normals_l1(const Tensor<T>&, std::span<const float>);                   \
  template Tensor<T> balanced_bce(const Tensor<T>&, std::span<const std::uint8_t>);          \
  template Tensor<T> mtl_loss(const std::map<TaskId, Tensor<T>>&, const std::map<TaskId, double>&);

MTLORA_INSTANTIATE_LOSSES(float)
MTLORA_INSTANTIATE_LOSSES(double)
MTLORA_INSTANTIATE_LOSSES(long double)

}  // namespace mtlora
