#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <new>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setcls {

using Shape = std::vector<std::size_t>;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// 64-byte aligned storage. Eigen's vectorized reductions peel an unaligned
// head, so without a fixed alignment the summation order (and the last bits
// of the result) would depend on where malloc placed the buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Every op in this library views a tensor as a
// matrix of (product of leading extents) x (last extent); a rank-1 tensor
// is a single row.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_size();
  }

  Tensor(Shape shape, Storage<T> data) : shape_(std::move(shape)), data_(std::move(data)) { check_size(); }

  Tensor(Shape shape, std::initializer_list<T> data) : shape_(std::move(shape)), data_(data) { check_size(); }

  static Tensor vector(const std::vector<T>& values) { return Tensor(Shape{values.size()}, values); }

  static Tensor matrix(std::size_t rows, std::size_t cols, const std::vector<T>& values) {
    return Tensor(Shape{rows, cols}, values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, Storage<T>{v}); }

 private:
  void check_size() const {
    if (shape_size(shape_) != data_.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }


 public:
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Storage<T>& values() { return data_; }
  const Storage<T>& values() const { return data_; }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  MatrixMap<T> mat() {
    return MatrixMap<T>(data_.data(), static_cast<Eigen::Index>(rows()),
                        static_cast<Eigen::Index>(cols()));
  }
  ConstMatrixMap<T> mat() const {
    return ConstMatrixMap<T>(data_.data(), static_cast<Eigen::Index>(rows()),
                             static_cast<Eigen::Index>(cols()));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Storage<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage<T> data_;
};

template <typename T>
inline Tensor<T> from_matrix(const Matrix<T>& m) {
  Tensor<T> out(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  out.mat() = m;
  return out;
}

// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.empty() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

}  // namespace setcls
