// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mtlora/errors.hpp"

namespace mtlora {

namespace {

template <typename R>
GradCheckResult check(const std::function<Tensor<double>()>& loss, const std::vector<Parameter<double>*>& params,
                      const std::function<Tensor<R>()>& reference, const std::vector<Parameter<R>*>& ref_params,
                      double eps, bool fourth_order) {
  if (!(eps > 0)) throw DomainError("grad_check: eps must be positive");
  if (params.size() != ref_params.size()) {
    throw UsageError("grad_check: reference has " + std::to_string(ref_params.size()) +
                     " parameters, expected " + std::to_string(params.size()));
  }
  for (auto* p : params) p->value.clear_grad();
  {
    Tensor<double> out = loss();
    if (out.numel() != 1) {
      throw UsageError("grad_check: loss must be scalar, got shape " + shape_str(out.shape()));
    }
    out.backward();
  }

  auto eval = [&] {
    NoGradGuard guard;
    return reference().item();
  };

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (!p->trainable()) continue;
    if (ref_params[k]->numel() != p->numel()) {
      throw UsageError("grad_check: reference parameter '" + ref_params[k]->name + "' has the wrong size");
    }
    const bool reached = p->value.has_grad();
    std::vector<double> analytic(static_cast<std::size_t>(p->numel()), 0.0);
    if (reached) std::copy(p->value.grad().begin(), p->value.grad().end(), analytic.begin());
    auto data = ref_params[k]->value.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const R saved = data[i];
      const R h = static_cast<R>(eps);
      auto at = [&](R offset) {
        data[i] = saved + offset;
        const R v = eval();
        data[i] = saved;
        return v;
      };
      double numeric;
      if (fourth_order) {
        numeric = static_cast<double>((at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h));
      } else {
        numeric = static_cast<double>((at(h) - at(-h)) / (2 * h));
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (err > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_parameter = p->name;
        result.worst_index = static_cast<std::int64_t>(i);
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           const std::vector<Parameter<double>*>& params, double eps) {
  return check<double>(loss, params, loss, params, eps, false);
}

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           const std::vector<Parameter<double>*>& params,
                           const std::function<Tensor<long double>()>& reference,
                           const std::vector<Parameter<long double>*>& reference_params, double eps) {
  return check<long double>(loss, params, reference, reference_params, eps, true);
}

}  // namespace mtlora
