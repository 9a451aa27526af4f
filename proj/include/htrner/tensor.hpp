#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace htrner {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const std::vector<int>& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

// Dense row-major tensor. Layout conventions used across the library:
// images and feature maps are NHWC, sequences are [rows, features].
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor payload " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  Tensor reshaped(std::vector<int> s) const {
    if (shape_numel(s) != data.size()) throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    return Tensor(std::move(s), data);
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
MatMap<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MatMap<T>(t.ptr(), rows, cols);
}
template <class T>
CMatMap<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return CMatMap<T>(t.ptr(), rows, cols);
}
// Treats the last dimension as columns.
template <class T>
MatMap<T> as_mat(Tensor<T>& t) {
  const int c = t.dim(-1);
  return MatMap<T>(t.ptr(), static_cast<int>(t.size() / c), c);
}
template <class T>
CMatMap<T> as_mat(const Tensor<T>& t) {
  const int c = t.dim(-1);
  return CMatMap<T>(t.ptr(), static_cast<int>(t.size() / c), c);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace htrner
