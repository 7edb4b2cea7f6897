#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "amortenc/errors.hpp"

namespace amortenc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

// Dense row-major array with an explicit shape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ParameterError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Contiguous slice along the leading axis.
  std::span<T> slab(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * stride, stride);
  }
  std::span<const T> slab(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * stride, stride);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// Per-layer hidden states, (L+1) x n x d; slab 0 is the embedding output.
template <typename T>
using BasicLayerFeatures = BasicTensor<T>;
using LayerFeatures = BasicLayerFeatures<float>;

// Features after layer pooling, n x d.
template <typename T>
using BasicPositionFeatures = BasicTensor<T>;
using PositionFeatures = BasicPositionFeatures<float>;

// One vector per example, shape (d).
template <typename T>
using BasicPooledVector = BasicTensor<T>;
using PooledVector = BasicPooledVector<float>;

}  // namespace amortenc
