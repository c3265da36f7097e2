#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "urwkv/error.hpp"

namespace urwkv {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles with value semantics.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check(data_.size() == numel(shape_), ErrorKind::shape,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
              urwkv::to_string(shape_));
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : t.data_) x = dist(rng);
    return t;
  }

  static Tensor normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : t.data_) x = dist(rng);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  double item() const {
    check(data_.size() == 1, ErrorKind::shape, "item() on tensor of shape " + urwkv::to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    check(numel(shape) == data_.size(), ErrorKind::shape,
          "cannot reshape " + urwkv::to_string(shape_) + " to " + urwkv::to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor& operator+=(const Tensor& other) {
    check(other.shape_ == shape_, ErrorKind::shape,
          "cannot accumulate " + urwkv::to_string(other.shape_) + " into " + urwkv::to_string(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    check(idx.size() == shape_.size(), ErrorKind::shape, "index rank mismatch for " + urwkv::to_string(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), ErrorKind::shape,
        "comparing " + to_string(a.shape()) + " with " + to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace urwkv
