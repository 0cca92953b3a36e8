#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cas/error.hpp"

namespace cas {

/// Dimension sizes, outermost first. Images are always N x C x H x W.
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array with an optional gradient buffer of the same shape.
template <std::floating_point T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {
    validate_dims();
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate_dims();
    require(data.size() == numel(shape), ErrorCode::shape,
            "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                cas::to_string(shape));
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  T item() const {
    require(data.size() == 1, ErrorCode::shape, "item() on non-scalar tensor " + cas::to_string(shape));
    return data[0];
  }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void zero_grad() { grad.reset(); }

  /// Gradient buffer, allocated as zeros on first use.
  std::vector<T>& grad_buffer() {
    if (!grad) grad.emplace(data.size(), T{0});
    return *grad;
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }

 private:
  void validate_dims() const {
    for (std::size_t d : shape)
      require(d > 0, ErrorCode::shape, "tensor dimensions must be positive, got " + cas::to_string(shape));
  }
};

}  // namespace cas
