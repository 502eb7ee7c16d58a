#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "divae/errors.hpp"

namespace divae::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major float64 array. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    require(shape_size(shape_) == values_.size(),
            "tensor: shape " + shape_str(shape_) + " does not match " + std::to_string(values_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }

  /// Length of the last axis (1 for scalars).
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading axes.
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }

  double& operator[](std::size_t i) { return values_[i]; }
  const double& operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  const double& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& storage() noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }

  double item() const {
    require(values_.size() == 1, "tensor: item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

}  // namespace divae::ad
