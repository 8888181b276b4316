#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "ctxseg/tensor.hpp"

// Minimal reverse-mode differentiation over dense tensors.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the forward value and a closure that pushes the output gradient into
// the gradients of its inputs. Nodes that do not (transitively) depend on a
// parameter carry no closure, so inference passes cost only the forward math.
namespace ctxseg::ad {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Tensor<T> value);

  // Appends an op result. The closure is kept only if some input requires grad.
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var<T> root);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator of node `id`, zero-initialised on first use;
  // nullptr when the node does not require a gradient.
  Tensor<T>* grad_sink(std::size_t id);

  // Gradient after backward(); zeros when the node was never reached.
  Tensor<T> grad(Var<T> v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> relu(Var<T> a);
template <typename T>
Var<T> exp(Var<T> a);

// a: [m, n], row: [n] or [1, n]; broadcasts row over the m rows.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row);
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row);

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

// ---------------------------------------------------------------------------
// Structural ops. `axis` addresses the logical dimension of the row-major
// tensor; all other dimensions must agree.

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}
// Rows of the leading axis in the given order (repeats allowed).
template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Normalisation and attention kernels on [m, n] matrices

template <typename T>
Var<T> softmax_rows(Var<T> a);

// Row softmax of a / exp(log_tau) restricted to mask(i, j) != 0; masked
// entries get probability 0. Every row needs at least one unmasked entry.
template <typename T>
Var<T> masked_softmax_rows(Var<T> a, std::span<const std::uint8_t> mask, Var<T> log_tau);

template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

// ---------------------------------------------------------------------------
// Image kernels on NCHW tensors

// x: [N, C, H, W], w: [O, C, K, K], b: [O] -> [N, O, H', W'].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad);
template <typename T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor);
// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(Var<T> x);

// Mean pixel cross-entropy. logits: [N, k, H, W], targets: N*H*W class indices.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint8_t> targets);

}  // namespace ctxseg::ad
