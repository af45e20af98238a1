// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtlora/tensor.hpp"

namespace mtlora {

// Elementwise arithmetic. `b` must have the same shape as `a` or a shape that
// is a trailing suffix of it (broadcast over the leading axes of `a`); add and
// mul also accept the mirrored case.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);

// a[..., m, k] x b[..., k, n] with numpy-style broadcasting of batch axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] * weight[out, in]^T + bias[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);
// a[index, ...] along the leading axis.
template <typename T>
Tensor<T> select(const Tensor<T>& a, std::int64_t index);
// out[..., j] = a[..., index[j]]; repeated indices accumulate in backward.
template <typename T>
Tensor<T> gather_lastdim(const Tensor<T>& a, std::span<const std::int64_t> index);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);
// tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// x[..., h, w] -> x[..., out_h, out_w]; half-pixel (align_corners=false)
// sampling with edge clamping.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// image[B, C, H, W] -> tokens[B, (H/p)*(W/p), C*p*p], grid row-major, features
// ordered (channel, row, col) within a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::int64_t patch);

// tokens[B, h*w, C] -> tokens[B, (h/2)*(w/2), 4C]; the four neighbours are
// concatenated as (even row, even col), (odd, even), (even, odd), (odd, odd).
template <typename T>
Tensor<T> merge_2x2(const Tensor<T>& x, std::int64_t h, std::int64_t w);

}  // namespace mtlora
