#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "afdet/common.hpp"

namespace afdet {

// Dense row-major tensor. Value semantics; copies never alias.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::int64_t> shape, T fill = T{})
      : shape_(std::move(shape)) {
    std::int64_t n = 1;
    for (auto d : shape_) {
      require(d >= 0, "tensor extent must be non-negative");
      n *= d;
    }
    data_.assign(static_cast<std::size_t>(n), fill);
  }

  static TensorT zeros(std::vector<std::int64_t> shape) {
    return TensorT(std::move(shape));
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(data_.size());
  }
  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  // (y, x) on rank-2, (c, y, x) on rank-3, (n, c, y, x) on rank-4.
  T& operator()(std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>(y * shape_[1] + x)];
  }
  const T& operator()(std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>(y * shape_[1] + x)];
  }
  T& operator()(std::int64_t c, std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  const T& operator()(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  T& operator()(std::int64_t n, std::int64_t c, std::int64_t y,
                std::int64_t x) {
    return data_[static_cast<std::size_t>(
        ((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  const T& operator()(std::int64_t n, std::int64_t c, std::int64_t y,
                      std::int64_t x) const {
    return data_[static_cast<std::size_t>(
        ((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i)
      out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << shape_[i] << (i + 1 < shape_.size() ? "x" : "");
    os << ']';
    return os.str();
  }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;
using ITensor = TensorT<std::int32_t>;

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                      const std::string& what) {
  require(a.same_shape(b),
          what + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace afdet
