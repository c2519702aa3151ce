#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fas/error.hpp"

namespace fas {

using Shape = std::vector<int>;

/// 64-byte aligned storage. Vectorised kernels peel loops by pointer
/// alignment, so a fixed alignment keeps floating-point results identical
/// from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Image-like data is laid out NHWC (channels last).
template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    require(data.size() == shape_numel(shape), ErrorCode::ShapeMismatch,
            "tensor data does not match shape " + shape_str(shape));
  }
  Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
    require(data.size() == shape_numel(shape), ErrorCode::ShapeMismatch,
            "tensor data does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)]; }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // 4-D NHWC accessor
  T& at(int n, int y, int x, int c) {
    return data[((static_cast<std::size_t>(n) * shape[1] + y) * shape[2] + x) * shape[3] + c];
  }
  const T& at(int n, int y, int x, int c) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + y) * shape[2] + x) * shape[3] + c];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor& other) const = default;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, ErrorCode::ShapeMismatch,
          "max_abs_diff " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace fas
