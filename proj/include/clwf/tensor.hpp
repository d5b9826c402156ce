#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace clwf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor of doubles. Plain value type.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_string(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // 2-D accessors; callers guarantee rank 2.
  double& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * shape_[1] + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * shape_[1] + c];
  }

  double item() const {
    if (data_.size() != 1) {
      throw std::invalid_argument("Tensor::item: tensor of shape " +
                                  shape_string(shape_) + " is not a scalar");
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw std::invalid_argument("Tensor::reshaped: cannot view " +
                                  shape_string(shape_) + " as " +
                                  shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  std::span<const double> row(std::size_t r) const {
    const std::size_t cols = data_.size() / shape_.at(0);
    return std::span<const double>(data_).subspan(r * cols, cols);
  }
  std::span<double> row(std::size_t r) {
    const std::size_t cols = data_.size() / shape_.at(0);
    return std::span<double>(data_).subspan(r * cols, cols);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double sum(const Tensor& t) {
  return std::accumulate(t.data().begin(), t.data().end(), 0.0);
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace clwf
