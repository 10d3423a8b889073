#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace alertgraph::nn {

// Dense row-major f64 tensor. All model arithmetic is 64-bit.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), v_(count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), v_(std::move(values)) {
    if (v_.size() != count(shape_)) throw std::invalid_argument("tensor: shape/value size mismatch");
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  static Tensor full(std::vector<std::size_t> shape, double x) {
    Tensor t(std::move(shape));
    for (auto& v : t.v_) v = x;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  // rank-2 helpers
  std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(rank() - 2); }
  std::size_t cols() const { return rank() == 0 ? 0 : shape_.back(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double& at(std::size_t r, std::size_t c) { return v_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return v_[r * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> v_;
};

}  // namespace alertgraph::nn
