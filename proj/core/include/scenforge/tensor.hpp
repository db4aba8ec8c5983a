#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenforge::nn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

/// Recycles equal-sized buffers through a thread-local free list and skips
/// value-initialization of doubles. Training tapes allocate the same handful
/// of shapes thousands of times; without this every large node pays an mmap
/// plus a memset.
template <class T>
struct PoolAllocator {
  using value_type = T;
  PoolAllocator() = default;
  template <class U>
  PoolAllocator(const PoolAllocator<U>&) {}

  T* allocate(std::size_t n);
  void deallocate(T* p, std::size_t n) noexcept;

  // Default-init: doubles come back uninitialized; callers fill explicitly.
  template <class U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  bool operator==(const PoolAllocator&) const { return true; }
};

double* pool_take(std::size_t n);
void pool_give(double* p, std::size_t n) noexcept;

template <>
inline double* PoolAllocator<double>::allocate(std::size_t n) {
  return pool_take(n);
}
template <>
inline void PoolAllocator<double>::deallocate(double* p, std::size_t n) noexcept {
  pool_give(p, n);
}

using ValueBuffer = std::vector<double, PoolAllocator<double>>;

/// Dense row-major tensor of 64-bit reals. The single value carrier for all
/// numeric computation in the toolkit.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, ValueBuffer values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  /// Allocated but not filled; every element must be written before reads.
  static Tensor uninit(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const { return data_.size(); }

  // 2-D helpers; throw on rank mismatch.
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  ValueBuffer& values() { return data_; }
  const ValueBuffer& values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Same storage reinterpreted under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  struct Uninit {};
  Tensor(Shape shape, Uninit);

  Shape shape_;
  ValueBuffer data_;
};

std::size_t shape_numel(const Shape& shape);

}  // namespace scenforge::nn
