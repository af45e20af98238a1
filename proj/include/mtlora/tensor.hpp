// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtlora {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage. Vectorized kernels peel by address, so a fixed
// alignment keeps results a function of shapes alone, independent of where
// the heap placed a buffer. With kZeroInit false, elements added by resize()
// or a size constructor are left uninitialized.
template <typename T, bool kZeroInit = true>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, kZeroInit>;
  };
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, kZeroInit>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  void construct(U* p) {
    if constexpr (kZeroInit) {
      ::new (static_cast<void*>(p)) U();
    } else {
      ::new (static_cast<void*>(p)) U;
    }
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

// Tensor storage. Kernels overwrite every element of a freshly sized buffer,
// so it skips the zero fill; pass a value to the constructor when one is needed.
template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T, false>>;

namespace detail {

template <typename T>
struct TensorImpl;

// Backward closures read the output gradient from `out` and accumulate into
// the inputs they captured. They never capture the output itself.
template <typename T>
using BackwardFn = std::function<void(const TensorImpl<T>& out)>;

template <typename T>
struct Node {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool grad_allocated = false;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  std::span<T> grad_buffer() {
    if (!grad_allocated) {
      grad.assign(data.size(), T(0));
      grad_allocated = true;
    }
    return grad;
  }

  // Like grad_buffer(), but a newly allocated buffer is left unspecified and
  // `fresh` is set: the caller must overwrite every element instead of
  // accumulating.
  T* grad_target(bool& fresh) {
    fresh = !grad_allocated;
    if (fresh) {
      grad.resize(data.size());
      grad_allocated = true;
    }
    return grad.data();
  }
};

}  // namespace detail

// Dense row-major array with reverse-mode gradient support. Copies share the
// underlying storage; use clone() for an independent leaf.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Negative indices count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  // Direct write access for initialization and optimizer updates of leaves.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();
  void clear_grad();
  bool has_tape() const;

  // Reverse-mode sweep from a scalar; frees the tape afterwards.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Thread-local tally of matmul/linear FLOPs (multiply-add = 2) issued by
// forward evaluation. Backward work is not counted.
class FlopScope {
 public:
  FlopScope();
  std::uint64_t flops() const;

 private:
  std::uint64_t start_;
};

void count_flops(std::uint64_t flops);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tensor<long double>;

}  // namespace mtlora
