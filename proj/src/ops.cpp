// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtlora/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "autograd.hpp"
#include "mtlora/errors.hpp"

namespace mtlora {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ConstRowVec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using RowVec = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

using detail::make_output;
using detail::TensorImpl;

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  }
  const std::int64_t inner = b.numel();
  const std::int64_t outer = inner == 0 ? 0 : a.numel() / inner;
  const auto ad = a.data();
  const auto bd = b.data();
  Buffer<T> out(ad.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* ap = ad.data() + o * inner;
    T* op = out.data() + o * inner;
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::int64_t i = 0; i < inner; ++i) op[i] = ap[i] + bd[sz(i)];
        break;
      case BinaryKind::kSub:
        for (std::int64_t i = 0; i < inner; ++i) op[i] = ap[i] - bd[sz(i)];
        break;
      case BinaryKind::kMul:
        for (std::int64_t i = 0; i < inner; ++i) op[i] = ap[i] * bd[sz(i)];
        break;
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_output<T>(a.shape(), std::move(out), {&a, &b},
                        [ai, bi, inner, outer, kind](const TensorImpl<T>& res) {
                          const T* g = res.grad.data();
                          const std::int64_t n = outer * inner;
                          if (ai->requires_grad) {
                            bool fresh = false;
                            T* ga = ai->grad_target(fresh);
                            if (kind == BinaryKind::kMul) {
                              const T* bv = bi->data.data();
                              for (std::int64_t o = 0; o < outer; ++o) {
                                const T* go = g + o * inner;
                                T* gao = ga + o * inner;
                                if (fresh) {
                                  for (std::int64_t i = 0; i < inner; ++i) gao[i] = go[i] * bv[i];
                                } else {
                                  for (std::int64_t i = 0; i < inner; ++i) gao[i] += go[i] * bv[i];
                                }
                              }
                            } else if (fresh) {
                              std::copy(g, g + n, ga);
                            } else {
                              for (std::int64_t k = 0; k < n; ++k) ga[k] += g[k];
                            }
                          }
                          if (bi->requires_grad) {
                            T* gb = bi->grad_buffer().data();
                            const T* av = ai->data.data();
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const T* go = g + o * inner;
                              if (kind == BinaryKind::kAdd) {
                                for (std::int64_t i = 0; i < inner; ++i) gb[i] += go[i];
                              } else if (kind == BinaryKind::kSub) {
                                for (std::int64_t i = 0; i < inner; ++i) gb[i] -= go[i];
                              } else {
                                const T* ao = av + o * inner;
                                for (std::int64_t i = 0; i < inner; ++i) gb[i] += go[i] * ao[i];
                              }
                            }
                          }
                        });
}

// Offsets (in matrices) into an operand whose batch shape is broadcast to `out`.
std::vector<std::int64_t> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> strides(r, 0);
  std::int64_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t in_axis = in.size() - 1 - k;
    const std::size_t out_axis = r - 1 - k;
    strides[out_axis] = in[in_axis] == 1 ? 0 : s;
    s *= in[in_axis];
  }
  const std::int64_t n = shape_numel(out);
  std::vector<std::int64_t> offsets(sz(n), 0);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    offsets[sz(flat)] = off;
    for (std::size_t axis = r; axis-- > 0;) {
      ++idx[axis];
      off += strides[axis];
      if (idx[axis] < out[axis]) break;
      off -= strides[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  return offsets;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape()) && is_suffix(b.shape(), a.shape())) {
    return binary(b, a, BinaryKind::kAdd, "add");
  }
  return binary(a, b, BinaryKind::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape()) && is_suffix(b.shape(), a.shape())) {
    return binary(b, a, BinaryKind::kMul, "mul");
  }
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto ad = a.data();
  Buffer<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  auto ai = a.impl();
  return make_output<T>(a.shape(), std::move(out), {&a}, [ai, factor](const TensorImpl<T>& res) {
    bool fresh = false;
    T* ga = ai->grad_target(fresh);
    if (fresh) {
      for (std::size_t i = 0; i < res.grad.size(); ++i) ga[i] = res.grad[i] * factor;
    } else {
      for (std::size_t i = 0; i < res.grad.size(); ++i) ga[i] += res.grad[i] * factor;
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  const auto ad = a.data();
  Buffer<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + value;
  auto ai = a.impl();
  return make_output<T>(a.shape(), std::move(out), {&a}, [ai](const TensorImpl<T>& res) {
    bool fresh = false;
    T* ga = ai->grad_target(fresh);
    if (fresh) {
      std::copy(res.grad.begin(), res.grad.end(), ga);
    } else {
      for (std::size_t i = 0; i < res.grad.size(); ++i) ga[i] += res.grad[i];
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch(std::max(abatch.size(), bbatch.size()), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::int64_t da = i < abatch.size() ? abatch[abatch.size() - 1 - i] : 1;
    const std::int64_t db = i < bbatch.size() ? bbatch[bbatch.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul: batch axes of " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " do not broadcast");
    }
    batch[batch.size() - 1 - i] = std::max(da, db);
  }
  auto a_off = broadcast_offsets(batch, abatch);
  auto b_off = broadcast_offsets(batch, bbatch);
  const std::int64_t nb = shape_numel(batch);
  Buffer<T> out(sz(nb * m * n));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t i = 0; i < nb; ++i) {
    ConstMatMap<T> am(ad + a_off[sz(i)] * m * k, m, k);
    ConstMatMap<T> bm(bd + b_off[sz(i)] * k * n, k, n);
    MatMap<T> cm(out.data() + i * m * n, m, n);
    cm.noalias() = am * bm;
  }
  count_flops(static_cast<std::uint64_t>(2 * nb * m * k * n));
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool a_once = shape_numel(abatch) == nb;
  const bool b_once = shape_numel(bbatch) == nb;
  auto ai = a.impl();
  auto bi = b.impl();
  return make_output<T>(
      std::move(out_shape), std::move(out), {&a, &b},
      [ai, bi, a_off = std::move(a_off), b_off = std::move(b_off), nb, m, k, n, a_once,
       b_once](const TensorImpl<T>& res) {
        // A fresh buffer may be overwritten when each operand matrix is hit
        // exactly once; broadcast operands accumulate over a zeroed buffer.
        bool fresh_a = false, fresh_b = false;
        T* ga_base = nullptr;
        T* gb_base = nullptr;
        if (ai->requires_grad) {
          ga_base = a_once ? ai->grad_target(fresh_a) : ai->grad_buffer().data();
        }
        if (bi->requires_grad) {
          gb_base = b_once ? bi->grad_target(fresh_b) : bi->grad_buffer().data();
        }
        for (std::int64_t i = 0; i < nb; ++i) {
          ConstMatMap<T> gm(res.grad.data() + i * m * n, m, n);
          if (ga_base) {
            MatMap<T> ga(ga_base + a_off[sz(i)] * m * k, m, k);
            ConstMatMap<T> bm(bi->data.data() + b_off[sz(i)] * k * n, k, n);
            if (fresh_a) {
              ga.noalias() = gm * bm.transpose();
            } else {
              ga.noalias() += gm * bm.transpose();
            }
          }
          if (gb_base) {
            MatMap<T> gb(gb_base + b_off[sz(i)] * k * n, k, n);
            ConstMatMap<T> am(ai->data.data() + a_off[sz(i)] * m * k, m, k);
            if (fresh_b) {
              gb.noalias() = am.transpose() * gm;
            } else {
              gb.noalias() += am.transpose() * gm;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::int64_t in = weight.dim(1);
  const std::int64_t outf = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::int64_t rows = in == 0 ? 0 : x.numel() / in;
  Buffer<T> out(sz(rows * outf));
  ConstMatMap<T> xm(x.data().data(), rows, in);
  ConstMatMap<T> wm(weight.data().data(), outf, in);
  MatMap<T> ym(out.data(), rows, outf);
  ym.noalias() = xm * wm.transpose();
  if (bias.defined()) ym.rowwise() += ConstRowVec<T>(bias.data().data(), outf);
  count_flops(static_cast<std::uint64_t>(2 * rows * in * outf));
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  auto xi = x.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return make_output<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                        [xi, wi, bi, rows, in, outf](const TensorImpl<T>& res) {
                          ConstMatMap<T> gm(res.grad.data(), rows, outf);
                          bool fresh = false;
                          if (xi->requires_grad) {
                            MatMap<T> gx(xi->grad_target(fresh), rows, in);
                            ConstMatMap<T> wm(wi->data.data(), outf, in);
                            if (fresh) {
                              gx.noalias() = gm * wm;
                            } else {
                              gx.noalias() += gm * wm;
                            }
                          }
                          if (wi->requires_grad) {
                            MatMap<T> gw(wi->grad_target(fresh), outf, in);
                            ConstMatMap<T> xm(xi->data.data(), rows, in);
                            if (fresh) {
                              gw.noalias() = gm.transpose() * xm;
                            } else {
                              gw.noalias() += gm.transpose() * xm;
                            }
                          }
                          if (bi && bi->requires_grad) {
                            RowVec<T> gb(bi->grad_target(fresh), outf);
                            if (fresh) {
                              gb = gm.colwise().sum();
                            } else {
                              gb += gm.colwise().sum();
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  auto ai = a.impl();
  return make_output<T>(std::move(shape), std::move(out), {&a}, [ai](const TensorImpl<T>& res) {
    bool fresh = false;
    T* ga = ai->grad_target(fresh);
    if (fresh) {
      std::copy(res.grad.begin(), res.grad.end(), ga);
    } else {
      for (std::size_t i = 0; i < res.grad.size(); ++i) ga[i] += res.grad[i];
    }
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  const std::size_t r = a.shape().size();
  if (axes.size() != r) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                         shape_str(a.shape()));
  }
  std::vector<bool> seen(r, false);
  for (int ax : axes) {
    if (ax < 0 || static_cast<std::size_t>(ax) >= r || seen[sz(ax)]) {
      throw DimensionError("permute: invalid axis order for shape " + shape_str(a.shape()));
    }
    seen[sz(ax)] = true;
  }
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  Shape out_shape(r);
  std::vector<std::int64_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[sz(axes[i])];
    strides[i] = in_strides[sz(axes[i])];
  }
  const std::int64_t n = a.numel();
  // src[o] = flat input offset of output element o.
  std::vector<std::int64_t> src(sz(n));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t o = 0; o < n; ++o) {
      src[sz(o)] = off;
      for (std::size_t axis = r; axis-- > 0;) {
        ++idx[axis];
        off += strides[axis];
        if (idx[axis] < out_shape[axis]) break;
        off -= strides[axis] * idx[axis];
        idx[axis] = 0;
      }
    }
  }
  const auto ad = a.data();
  Buffer<T> out(sz(n));
  for (std::int64_t o = 0; o < n; ++o) out[sz(o)] = ad[sz(src[sz(o)])];
  auto ai = a.impl();
  return make_output<T>(std::move(out_shape), std::move(out), {&a},
                        [ai, src = std::move(src)](const TensorImpl<T>& res) {
                          bool fresh = false;
                          T* ga = ai->grad_target(fresh);
                          if (fresh) {
                            for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] = res.grad[o];
                          } else {
                            for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += res.grad[o];
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  const int r = a.rank();
  if (axis0 < 0) axis0 += r;
  if (axis1 < 0) axis1 += r;
  std::vector<int> axes(sz(r));
  std::iota(axes.begin(), axes.end(), 0);
  if (axis0 < 0 || axis0 >= r || axis1 < 0 || axis1 >= r) {
    throw DimensionError("transpose: axis out of range for shape " + shape_str(a.shape()));
  }
  std::swap(axes[sz(axis0)], axes[sz(axis1)]);
  return permute(a, axes);
}

template <typename T>
Tensor<T> select(const Tensor<T>& a, std::int64_t index) {
  if (a.rank() < 1 || index < 0 || index >= a.dim(0)) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for shape " +
                         shape_str(a.shape()));
  }
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  const std::int64_t inner = shape_numel(out_shape);
  const auto ad = a.data();
  Buffer<T> out(ad.begin() + index * inner, ad.begin() + (index + 1) * inner);
  auto ai = a.impl();
  return make_output<T>(std::move(out_shape), std::move(out), {&a},
                        [ai, index, inner](const TensorImpl<T>& res) {
                          T* ga = ai->grad_buffer().data() + index * inner;
                          for (std::int64_t i = 0; i < inner; ++i) ga[i] += res.grad[sz(i)];
                        });
}

template <typename T>
Tensor<T> gather_lastdim(const Tensor<T>& a, std::span<const std::int64_t> index) {
  const std::int64_t n = a.dim(-1);
  for (auto i : index) {
    if (i < 0 || i >= n) {
      throw DimensionError("gather_lastdim: index " + std::to_string(i) +
                           " out of range for shape " + shape_str(a.shape()));
    }
  }
  const std::int64_t m = static_cast<std::int64_t>(index.size());
  const std::int64_t rows = n == 0 ? 0 : a.numel() / n;
  Shape out_shape = a.shape();
  out_shape.back() = m;
  const auto ad = a.data();
  Buffer<T> out(sz(rows * m));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < m; ++j) out[sz(r * m + j)] = ad[sz(r * n + index[sz(j)])];
  auto ai = a.impl();
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return make_output<T>(std::move(out_shape), std::move(out), {&a},
                        [ai, idx = std::move(idx), rows, n, m](const TensorImpl<T>& res) {
                          T* ga = ai->grad_buffer().data();
                          for (std::int64_t r = 0; r < rows; ++r)
                            for (std::int64_t j = 0; j < m; ++j)
                              ga[r * n + idx[sz(j)]] += res.grad[sz(r * m + j)];
                        });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::int64_t d = x.dim(-1);
  if (d < 1) throw DimensionError("softmax_lastdim: empty last axis in " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / d;
  const auto xd = x.data();
  Buffer<T> out(xd.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xp = xd.data() + r * d;
    T* yp = out.data() + r * d;
    const T mx = *std::max_element(xp, xp + d);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> y(yp, d);
    y = (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(xp, d) - mx).exp();
    y *= T(1) / y.sum();
  }
  auto xi = x.impl();
  return make_output<T>(x.shape(), std::move(out), {&x}, [xi, rows, d](const TensorImpl<T>& res) {
    bool fresh = false;
    T* gx = xi->grad_target(fresh);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = res.data.data() + r * d;
      const T* g = res.grad.data() + r * d;
      T* out = gx + r * d;
      T dot = 0;
      for (std::int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
      if (fresh) {
        for (std::int64_t i = 0; i < d; ++i) out[i] = y[i] * (g[i] - dot);
      } else {
        for (std::int64_t i = 0; i < d; ++i) out[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  if (!(eps > 0)) throw DomainError("layer_norm: eps must be positive");
  const std::int64_t rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  Buffer<T> out(xd.size());
  Buffer<T> xhat(xd.size());
  Buffer<T> rstd(sz(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xp = xd.data() + r * d;
    T mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += xp[i];
    mu /= T(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[sz(r)] = rs;
    for (std::int64_t i = 0; i < d; ++i) {
      const T h = (xp[i] - mu) * rs;
      xhat[sz(r * d + i)] = h;
      out[sz(r * d + i)] = gd[sz(i)] * h + bd[sz(i)];
    }
  }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  return make_output<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xi, gi, bi, xhat = std::move(xhat), rstd = std::move(rstd), rows,
       d](const TensorImpl<T>& res) {
        const T* g = res.grad.data();
        if (gi->requires_grad || bi->requires_grad) {
          T* gg = gi->requires_grad ? gi->grad_buffer().data() : nullptr;
          T* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
          for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t i = 0; i < d; ++i) {
              if (gg) gg[i] += g[r * d + i] * xhat[sz(r * d + i)];
              if (gb) gb[i] += g[r * d + i];
            }
          }
        }
        if (xi->requires_grad) {
          bool fresh = false;
          T* gx = xi->grad_target(fresh);
          if (fresh) std::fill(gx, gx + rows * d, T(0));
          const T* gam = gi->data.data();
          for (std::int64_t r = 0; r < rows; ++r) {
            T mean_dh = 0;
            T mean_dh_h = 0;
            for (std::int64_t i = 0; i < d; ++i) {
              const T dh = g[r * d + i] * gam[i];
              mean_dh += dh;
              mean_dh_h += dh * xhat[sz(r * d + i)];
            }
            mean_dh /= T(d);
            mean_dh_h /= T(d);
            const T rs = rstd[sz(r)];
            for (std::int64_t i = 0; i < d; ++i) {
              const T dh = g[r * d + i] * gam[i];
              gx[r * d + i] += rs * (dh - mean_dh - xhat[sz(r * d + i)] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto xd = x.data();
  const auto n = static_cast<Eigen::Index>(xd.size());
  Eigen::Map<const Arr> v(xd.data(), n);
  const Arr t = (kC * (v + kA * v.cube())).tanh();
  Buffer<T> out(xd.size());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * v * (T(1) + t);
  if (!detail::any_requires_grad<T>({&x})) return Tensor<T>(x.shape(), std::move(out));
  // Derivative kept from the forward pass.
  auto deriv = std::make_shared<Buffer<T>>(xd.size());
  Eigen::Map<Arr>(deriv->data(), n) =
      T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * kC * (T(1) + T(3) * kA * v.square());
  auto xi = x.impl();
  return make_output<T>(x.shape(), std::move(out), {&x}, [xi, deriv](const TensorImpl<T>& res) {
    bool fresh = false;
    T* gx = xi->grad_target(fresh);
    const T* d = deriv->data();
    if (fresh) {
      for (std::size_t i = 0; i < res.grad.size(); ++i) gx[i] = res.grad[i] * d[i];
    } else {
      for (std::size_t i = 0; i < res.grad.size(); ++i) gx[i] += res.grad[i] * d[i];
    }
  });
}

namespace {

struct Taps {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;
  std::vector<double> frac;
};

Taps resize_taps(std::int64_t in, std::int64_t out) {
  Taps taps;
  taps.lo.resize(sz(out));
  taps.hi.resize(sz(out));
  taps.frac.resize(sz(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    const std::int64_t hi = std::min(lo + 1, in - 1);
    taps.lo[sz(o)] = lo;
    taps.hi[sz(o)] = hi;
    taps.frac[sz(o)] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1 || x.rank() < 2) {
    throw DimensionError("bilinear_resize: invalid target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " for " + shape_str(x.shape()));
  }
  const std::int64_t h = x.dim(-2);
  const std::int64_t w = x.dim(-1);
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  const std::int64_t planes = x.numel() / (h * w);
  const Taps ty = resize_taps(h, out_h);
  const Taps tx = resize_taps(w, out_w);
  const auto xd = x.data();
  Buffer<T> out(sz(planes * out_h * out_w));
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const T fy = T(ty.frac[sz(oy)]);
      const T* r0 = src + ty.lo[sz(oy)] * w;
      const T* r1 = src + ty.hi[sz(oy)] * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const T fx = T(tx.frac[sz(ox)]);
        const auto x0 = tx.lo[sz(ox)];
        const auto x1 = tx.hi[sz(ox)];
        const T top = (T(1) - fx) * r0[x0] + fx * r0[x1];
        const T bot = (T(1) - fx) * r1[x0] + fx * r1[x1];
        dst[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape.back() = out_w;
  auto xi = x.impl();
  return make_output<T>(std::move(out_shape), std::move(out), {&x},
                        [xi, ty, tx, planes, h, w, out_h, out_w](const TensorImpl<T>& res) {
                          T* gx = xi->grad_buffer().data();
                          for (std::int64_t p = 0; p < planes; ++p) {
                            T* dst = gx + p * h * w;
                            const T* g = res.grad.data() + p * out_h * out_w;
                            for (std::int64_t oy = 0; oy < out_h; ++oy) {
                              const T fy = T(ty.frac[sz(oy)]);
                              T* r0 = dst + ty.lo[sz(oy)] * w;
                              T* r1 = dst + ty.hi[sz(oy)] * w;
                              for (std::int64_t ox = 0; ox < out_w; ++ox) {
                                const T fx = T(tx.frac[sz(ox)]);
                                const T gv = g[oy * out_w + ox];
                                const auto x0 = tx.lo[sz(ox)];
                                const auto x1 = tx.hi[sz(ox)];
                                r0[x0] += (T(1) - fy) * (T(1) - fx) * gv;
                                r0[x1] += (T(1) - fy) * fx * gv;
                                r1[x0] += fy * (T(1) - fx) * gv;
                                r1[x1] += fy * fx * gv;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  auto ai = a.impl();
  return make_output<T>(Shape{}, Buffer<T>{total}, {&a}, [ai](const TensorImpl<T>& res) {
    T* ga = ai->grad_buffer().data();
    const T g = res.grad[0];
    for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::int64_t patch) {
  if (image.rank() != 4) {
    throw DimensionError("patchify: expected [B, C, H, W], got " + shape_str(image.shape()));
  }
  const std::int64_t b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by patch size " + std::to_string(patch));
  }
  const std::int64_t gh = h / patch, gw = w / patch;
  const std::int64_t feat = c * patch * patch;
  const std::int64_t n = image.numel();
  std::vector<std::int64_t> src(sz(n));
  std::int64_t o = 0;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx)
        for (std::int64_t ci = 0; ci < c; ++ci)
          for (std::int64_t py = 0; py < patch; ++py)
            for (std::int64_t px = 0; px < patch; ++px)
              src[sz(o++)] = ((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px;
  const auto d = image.data();
  Buffer<T> out(sz(n));
  for (std::int64_t i = 0; i < n; ++i) out[sz(i)] = d[sz(src[sz(i)])];
  auto ii = image.impl();
  return make_output<T>(Shape{b, gh * gw, feat}, std::move(out), {&image},
                        [ii, src = std::move(src)](const TensorImpl<T>& res) {
                          T* g = ii->grad_buffer().data();
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += res.grad[i];
                        });
}

template <typename T>
Tensor<T> merge_2x2(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  if (x.rank() != 3 || x.dim(1) != h * w) {
    throw DimensionError("merge_2x2: tokens " + shape_str(x.shape()) + " do not form a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("merge_2x2: grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " has an odd extent");
  }
  const std::int64_t b = x.dim(0), c = x.dim(2);
  const std::int64_t oh = h / 2, ow = w / 2;
  constexpr std::int64_t kDy[4] = {0, 1, 0, 1};
  constexpr std::int64_t kDx[4] = {0, 0, 1, 1};
  std::vector<std::int64_t> src(sz(x.numel()));
  std::int64_t o = 0;
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        for (int q = 0; q < 4; ++q) {
          const std::int64_t tok = (2 * y + kDy[q]) * w + 2 * xx + kDx[q];
          for (std::int64_t ci = 0; ci < c; ++ci) src[sz(o++)] = (bi * h * w + tok) * c + ci;
        }
  const auto d = x.data();
  Buffer<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = d[sz(src[i])];
  auto xi = x.impl();
  return make_output<T>(Shape{b, oh * ow, 4 * c}, std::move(out), {&x},
                        [xi, src = std::move(src)](const TensorImpl<T>& res) {
                          T* g = xi->grad_buffer().data();
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += res.grad[i];
                        });
}

#define MTLORA_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                   \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                \
  template Tensor<T> select(const Tensor<T>&, std::int64_t);                               \
  template Tensor<T> gather_lastdim(const Tensor<T>&, std::span<const std::int64_t>);      \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> gelu(const Tensor<T>&);                                               \
  template Tensor<T> bilinear_resize(const Tensor<T>&, std::int64_t, std::int64_t);        \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&);                                               \
  template Tensor<T> patchify(const Tensor<T>&, std::int64_t);                             \
  template Tensor<T> merge_2x2(const Tensor<T>&, std::int64_t, std::int64_t);

MTLORA_INSTANTIATE_OPS(float)
MTLORA_INSTANTIATE_OPS(double)
MTLORA_INSTANTIATE_OPS(long double)

}  // namespace mtlora
