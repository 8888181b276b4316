#include "ctxseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ctxseg/error.hpp"

namespace ctxseg {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(values_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(values_.begin(), values_.end(), value);
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& m) {
  if (m.rank() != 2) throw ShapeError("transpose2d expects a matrix, got " + shape_string(m.shape()));
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor<T> out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = m.at(r, c);
  return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> transpose2d(const Tensor<float>&);
template Tensor<double> transpose2d(const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace ctxseg
