// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtlora/parameter.hpp"

namespace mtlora {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t checked = 0;
};

// Compares backward() against central differences (f(p+eps) - f(p-eps)) / 2eps
// for every element of every trainable parameter in `params`. Relative error
// uses max(|analytic|, |numeric|, 1e-8) as denominator. `loss` must rebuild the
// graph on every call and return a scalar.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           const std::vector<Parameter<double>*>& params, double eps = 1e-5);

// Same comparison, but the differences come from `reference`, an
// extended-precision copy of the function whose parameters mirror `params`
// one to one, using the fourth-order central stencil
// (f(p-2h) - 8 f(p-h) + 8 f(p+h) - f(p+2h)) / 12h. A double-precision
// two-point difference cannot resolve gradients much below ulp(loss) / eps,
// and its eps^2 truncation term swamps gradients near 1e-9.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           const std::vector<Parameter<double>*>& params,
                           const std::function<Tensor<long double>()>& reference,
                           const std::vector<Parameter<long double>*>& reference_params,
                           double eps = 1e-4);

}  // namespace mtlora
