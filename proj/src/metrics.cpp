// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtlora/errors.hpp"

namespace mtlora {

ConfusionMatrix::ConfusionMatrix(std::int64_t classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes * classes), 0) {
  if (classes < 1) throw DomainError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("confusion matrix: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " labels");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= classes_ || truth[i] >= classes_) {
      throw DomainError("confusion matrix: class id out of range");
    }
    ++counts_[static_cast<std::size_t>(truth[i] * classes_ + pred[i])];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw DimensionError("confusion matrix class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::count(std::int64_t truth, std::int64_t pred) const {
  return counts_[static_cast<std::size_t>(truth * classes_ + pred)];
}

double ConfusionMatrix::miou() const {
  double total = 0.0;
  int present = 0;
  for (std::int64_t c = 0; c < classes_; ++c) {
    std::int64_t tp = count(c, c), fp = 0, fn = 0;
    for (std::int64_t o = 0; o < classes_; ++o) {
      if (o == c) continue;
      fp += count(o, c);
      fn += count(c, o);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    total += static_cast<double>(tp) / static_cast<double>(denom);
    ++present;
  }
  if (present == 0) throw UsageError("mIoU of an empty confusion matrix");
  return total / present;
}

void AngularError::add(std::span<const float> pred, std::span<const float> truth,
                       std::int64_t hw) {
  if (pred.size() != truth.size() || hw < 1 || pred.size() % static_cast<std::size_t>(3 * hw)) {
    throw DimensionError("angular error: mismatched normal maps");
  }
  const std::int64_t b = static_cast<std::int64_t>(pred.size()) / (3 * hw);
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t q = 0; q < hw; ++q) {
      double dot = 0.0, pp = 0.0, tt = 0.0;
      for (int c = 0; c < 3; ++c) {
        const auto i = static_cast<std::size_t>(n * 3 * hw + c * hw + q);
        dot += static_cast<double>(pred[i]) * truth[i];
        pp += static_cast<double>(pred[i]) * pred[i];
        tt += static_cast<double>(truth[i]) * truth[i];
      }
      const double denom = std::sqrt(pp) * std::sqrt(tt);
      // A zero prediction has no direction; count it as orthogonal.
      const double cosv = denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
      const double deg = std::acos(cosv) * 180.0 / std::numbers::pi;
      sum_sq_ += deg * deg;
      ++pixels_;
    }
  }
}

void AngularError::merge(const AngularError& other) {
  sum_sq_ += other.sum_sq_;
  pixels_ += other.pixels_;
}

double AngularError::rmse() const {
  if (pixels_ == 0) throw UsageError("angular rmse of an empty set");
  return std::sqrt(sum_sq_ / static_cast<double>(pixels_));
}

std::vector<std::uint8_t> argmax_channels(const Tensor<float>& logits) {
  if (logits.rank() != 4) throw DimensionError("argmax_channels expects [B, K, H, W]");
  const std::int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto z = logits.data();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(b * hw));
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t q = 0; q < hw; ++q) {
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        if (z[static_cast<std::size_t>((n * k + c) * hw + q)] >
            z[static_cast<std::size_t>((n * k + best) * hw + q)]) {
          best = c;
        }
      }
      out[static_cast<std::size_t>(n * hw + q)] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

std::vector<std::uint8_t> threshold_logits(const Tensor<float>& logits) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(logits.numel()));
  const auto z = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z[i] > 0.0f ? 1 : 0;
  return out;
}

double delta_m(const std::map<TaskId, double>& metrics, const std::map<TaskId, double>& baselines,
               const std::map<TaskId, bool>& lower_is_better) {
  if (metrics.empty()) throw UsageError("delta_m needs at least one task");
  double total = 0.0;
  for (const auto& [task, m] : metrics) {
    auto b = baselines.find(task);
    if (b == baselines.end()) throw ConfigError("no baseline for task '" + task + "'");
    if (b->second == 0.0) throw DomainError("baseline for task '" + task + "' is zero");
    auto l = lower_is_better.find(task);
    const bool lower = l != lower_is_better.end() && l->second;
    const double rel = (m - b->second) / b->second;
    total += lower ? -rel : rel;
  }
  return 100.0 * total / static_cast<double>(metrics.size());
}

}  // namespace mtlora
