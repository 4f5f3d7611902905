#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "echoseg/error.hpp"

namespace echoseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Allocator with a fixed 64-byte alignment. Vectorized kernels take
/// different code paths for differently aligned buffers, so a fixed
/// alignment keeps results independent of where the heap places them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Float tensors carry feature maps and weights,
/// uint8 tensors carry label maps and binary masks.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw InvalidShapeError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Index helpers for the common NCHW / HW layouts.
  T& at(std::size_t y, std::size_t x) { return data_[y * shape_[1] + x]; }
  const T& at(std::size_t y, std::size_t x) const { return data_[y * shape_[1] + x]; }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }
  Tensor reshaped(Shape shape) && {
    Tensor t = std::move(*this);
    t.reshape(std::move(shape));
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Contiguous slice along the leading axis.
  Tensor slice0(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) {
      throw InvalidShapeError("slice0 out of range for shape " + shape_string(shape_));
    }
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    Tensor out(std::move(s));
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
              data_.begin() + static_cast<std::ptrdiff_t>(end * stride), out.data_.begin());
    return out;
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
      throw InvalidShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
    check_dims();
  }

  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw InvalidShapeError("tensor dimensions must be positive: " + shape_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

using FloatTensor = Tensor<float>;
/// Integer class map, shape [H,W] or [N,H,W]. Values are class indices.
using LabelMap = Tensor<std::uint8_t>;
/// Binary mask, values 0/1.
using Mask = Tensor<std::uint8_t>;

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw InvalidShapeError("stack of zero tensors");
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<T> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) {
      throw InvalidShapeError("stack: shape " + shape_string(t.shape()) + " differs from " +
                              shape_string(items[0].shape()));
    }
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace echoseg
