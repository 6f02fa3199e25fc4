#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mmtumor {

/// Dense row-major tensor of doubles. Convolutional activations use NCHW,
/// fully-connected activations use (N, F).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::initializer_list<std::size_t> shape, double fill = 0.0)
      : Tensor(std::vector<std::size_t>(shape), fill) {}

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element count of one leading-axis slice (one sample).
  std::size_t stride0() const noexcept;

  std::span<double> sample(std::size_t n) noexcept {
    return {data_.data() + n * stride0(), stride0()};
  }
  std::span<const double> sample(std::size_t n) const noexcept {
    return {data_.data() + n * stride0(), stride0()};
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(std::vector<std::size_t> shape) const;

  void fill(double v);
  void zero() { fill(0.0); }

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t element_count(const std::vector<std::size_t>& shape) noexcept;

}  // namespace mmtumor
