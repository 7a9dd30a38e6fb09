#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "wpca/errors.hpp"

namespace wpca {

// Dense row-major tensor of doubles. Rank is dynamic; shape entries must be
// positive. Value semantics (copies copy the buffer); moves are cheap.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(check_shape(shape_), 0.0);
  }

  Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (check_shape(shape_) != data_.size())
      throw shape_error("tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at2(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double& at2(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at3(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  // Same buffer, new shape. Element count must be preserved.
  Tensor reshaped(std::vector<std::int64_t> shape) const& {
    Tensor t;
    t.shape_ = std::move(shape);
    if (check_shape(t.shape_) != data_.size())
      throw shape_error("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(t.shape_));
    t.data_ = data_;
    return t;
  }
  Tensor reshaped(std::vector<std::int64_t> shape) && {
    Tensor t;
    t.shape_ = std::move(shape);
    if (check_shape(t.shape_) != data_.size())
      throw shape_error("reshape: cannot view " + shape_string(shape_) + " as " + shape_string(t.shape_));
    t.data_ = std::move(data_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::string shape_string(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
  }

 private:
  static std::size_t check_shape(const std::vector<std::int64_t>& shape) {
    std::size_t n = 1;
    for (std::int64_t d : shape) {
      if (d <= 0) throw shape_error("tensor: shape entries must be positive, got " + shape_string(shape));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace wpca
