#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcube {

// Dense row-major tensor of doubles. Rank is dynamic; most of the library
// uses rank 1, 2 or 4 ([N,C,H,W]).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != count(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // [N,C,H,W] accessor
  double& at4(int n, int c, int h, int w) {
    return data_[static_cast<size_t>(((int64_t(n) * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  double at4(int n, int c, int h, int w) const {
    return data_[static_cast<size_t>(((int64_t(n) * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  // [N,K] accessor
  double& at2(int n, int k) { return data_[static_cast<size_t>(int64_t(n) * dim(1) + k)]; }
  double at2(int n, int k) const { return data_[static_cast<size_t>(int64_t(n) * dim(1) + k)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != numel()) throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  bool has_nan() const {
    for (double v : data_)
      if (!std::isfinite(v)) return true;
    return false;
  }

  double min() const { return *std::min_element(data_.begin(), data_.end()); }
  double max() const { return *std::max_element(data_.begin(), data_.end()); }
  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return numel() ? sum() / double(numel()) : 0.0; }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(where) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace dcube
