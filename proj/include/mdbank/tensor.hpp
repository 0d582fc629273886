#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdbank {

/// Dense row-major array of doubles. Shapes are small vectors; no views or
/// broadcasting, just storage plus shape bookkeeping.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::initializer_list<int> shape, double fill = 0.0)
      : Tensor(std::vector<int>(shape), fill) {}

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D and 3-D accessors; callers are responsible for rank.
  double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  std::span<double> row(int i) {
    const std::size_t w = size() / static_cast<std::size_t>(shape_[0]);
    return std::span<double>(data_).subspan(static_cast<std::size_t>(i) * w, w);
  }
  std::span<const double> row(int i) const {
    const std::size_t w = size() / static_cast<std::size_t>(shape_[0]);
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(i) * w, w);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) throw std::invalid_argument("reshape changes element count");
    shape_ = std::move(shape);
  }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<int>& shape);

}  // namespace mdbank
