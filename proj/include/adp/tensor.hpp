#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adp/errors.hpp"

namespace adp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Rank 0 is a scalar, rank 1 a vector, rank 2 a
/// matrix; the autodiff ops only need those three.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::vector<T> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Row/column view used by the matrix ops; a vector counts as one row.
  std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept {
    return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1);
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  // Views are not available on temporaries, which would leave them dangling.
  std::span<T> values() & noexcept { return data_; }
  std::span<const T> values() const& noexcept { return data_; }
  void values() && = delete;
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) & noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const& noexcept {
    return {data_.data() + r * cols(), cols()};
  }
  void row(std::size_t) && = delete;

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  bool all_finite() const noexcept {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace adp
