#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ctxseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  // 2-D element access; the tensor must be rank 2.
  T& at(std::size_t row, std::size_t col) { return values_[row * shape_[1] + col]; }
  const T& at(std::size_t row, std::size_t col) const { return values_[row * shape_[1] + col]; }

  Tensor reshaped(Shape shape) const;
  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> values_;
};

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& m);

// max |a - b| over all entries; shapes must agree.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ctxseg
