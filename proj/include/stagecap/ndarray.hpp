#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/error.hpp"

namespace stagecap {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles. A scalar has shape {1}.
class NDArray {
 public:
  NDArray() : shape_{1}, values_(1, 0.0) {}

  explicit NDArray(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(checked_size(shape_), fill) {}

  NDArray(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (checked_size(shape_) != values_.size()) {
      throw Error("NDArray: shape " + shape_string(shape_) + " needs " +
                  std::to_string(shape_size(shape_)) + " values, got " +
                  std::to_string(values_.size()));
    }
  }

  static NDArray scalar(double v) { return NDArray(Shape{1}, v); }

  static NDArray matrix(std::size_t rows, std::size_t cols,
                        std::vector<double> values) {
    return NDArray(Shape{rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  /// Leading extent after flattening all but the last axis.
  std::size_t rows() const { return values_.size() / cols(); }
  std::size_t cols() const { return shape_.back(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }

  double item() const {
    if (values_.size() != 1) {
      throw Error("NDArray::item on shape " + shape_string(shape_));
    }
    return values_[0];
  }

  void reshape(Shape shape) {
    if (checked_size(shape) != values_.size()) {
      throw Error("NDArray::reshape " + shape_string(shape_) + " -> " +
                  shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const NDArray& a, const NDArray& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw Error("NDArray: empty shape");
    for (std::size_t d : shape) {
      if (d == 0) throw Error("NDArray: zero extent in " + shape_string(shape));
    }
    return shape_size(shape);
  }

  Shape shape_;
  std::vector<double> values_;
};

}  // namespace stagecap
