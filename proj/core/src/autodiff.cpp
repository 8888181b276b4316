#include "ctxseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ctxseg/error.hpp"

namespace ctxseg::ad {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ContractError("op mixes variables from different tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.size() != node.value.size()) node.grad = Tensor<T>(node.value.shape());
  return &node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward needs a scalar root, got " + shape_string(root.shape()));
  }
  Tensor<T>* seed = grad_sink(root.id());
  if (!seed) return;
  (*seed)[0] += T{1};
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.size() == node.value.size()) return node.grad;
  return Tensor<T>(node.value.shape());
}

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisView {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.length = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

std::size_t row_length(const Shape& row, std::size_t expected, const char* op) {
  const std::size_t n = shape_size(row);
  if (!(row.size() == 1 || (row.size() == 2 && row[0] == 1)) || n != expected) {
    throw ShapeError(std::string(op) + ": row operand " + shape_string(row) + " does not broadcast over " +
                     std::to_string(expected) + " columns");
  }
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    for (auto id : {ia, ib})
      if (auto* s = t.grad_sink(id))
        for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
    if (auto* s = t.grad_sink(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * bv[i];
    if (auto* s = t.grad_sink(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T{0}) (*s)[i] += g[i];
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  const auto ia = a.id();
  auto& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(io);
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * y[i];
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  require_rank(a.shape(), 2, "add_row");
  const std::size_t m = a.dim(0), n = row_length(row.shape(), a.dim(1), "add_row");
  Tensor<T> out = a.value();
  const auto& r = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  const auto ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {a, row}, [ia, ir, m, n](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
    if (auto* s = t.grad_sink(ir))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*s)[j] += g[i * n + j];
  });
}

template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  require_rank(a.shape(), 2, "mul_row");
  const std::size_t m = a.dim(0), n = row_length(row.shape(), a.dim(1), "mul_row");
  Tensor<T> out = a.value();
  const auto& r = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= r[j];
  const auto ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {a, row}, [ia, ir, m, n](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(ia);
    const auto& rv = t.value(ir);
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*s)[i * n + j] += g[i * n + j] * rv[j];
    if (auto* s = t.grad_sink(ir))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*s)[j] += g[i * n + j] * av[i * n + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  const T* A = a.value().data();
  const T* B = b.value().data();
  T* C = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      if (aip == T{0}) continue;
      const T* brow = B + p * n;
      T* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    const T* A = t.value(ia).data();
    const T* B = t.value(ib).data();
    const T* G = g.data();
    if (auto* s = t.grad_sink(ia)) {
      T* dA = s->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc{0};
          const T* grow = G + i * n;
          const T* brow = B + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          dA[i * k + p] += acc;
        }
    }
    if (auto* s = t.grad_sink(ib)) {
      T* dB = s->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          if (aip == T{0}) continue;
          const T* grow = G + i * n;
          T* drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
        }
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = transpose2d(a.value());
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, m, n](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*s)[i * n + j] += g[j * m + i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().values()) total += v;
  const auto ia = a.id();
  return a.tape().record(Tensor<T>({1}, total), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (auto& v : s->values()) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view(a.shape(), axis, "slice");
  if (begin > end || end > v.length) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of bounds for " +
                     shape_string(a.shape()) + " axis " + std::to_string(axis));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const std::size_t span = (end - begin) * v.inner;
  const T* src = a.value().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(src + (o * v.length + begin) * v.inner, span, out.data() + o * span);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, v, begin, span](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t o = 0; o < v.outer; ++o) {
        T* dst = s->data() + (o * v.length + begin) * v.inner;
        const T* src = g.data() + o * span;
        for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + shape_string(shape));
  std::vector<AxisView> views;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != shape[d]) {
        throw ShapeError("concat: incompatible shapes " + shape_string(shape) + " and " + shape_string(s));
      }
    views.push_back(axis_view(s, axis, "concat"));
    total += s[axis];
  }
  shape[axis] = total;
  const AxisView whole = axis_view(shape, axis, "concat");
  Tensor<T> out(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    offsets.push_back(offset);
    const T* src = parts[i].value().data();
    const std::size_t span = views[i].length * whole.inner;
    for (std::size_t o = 0; o < whole.outer; ++o)
      std::copy_n(src + o * span, span, out.data() + (o * whole.length + offset) * whole.inner);
    offset += views[i].length;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(out), parts, [ids, views, offsets, whole](Tape<T>& t, const Tensor<T>& g) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
          auto* s = t.grad_sink(ids[i]);
          if (!s) continue;
          const std::size_t span = views[i].length * whole.inner;
          for (std::size_t o = 0; o < whole.outer; ++o) {
            const T* src = g.data() + (o * whole.length + offsets[i]) * whole.inner;
            T* dst = s->data() + o * span;
            for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
          }
        }
      });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows) {
  const AxisView v = axis_view(a.shape(), 0, "gather_rows");
  Shape shape = a.shape();
  shape[0] = rows.size();
  Tensor<T> out(shape);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v.length) {
      throw IndexError("gather_rows: row " + std::to_string(idx[r]) + " out of range " + std::to_string(v.length));
    }
    std::copy_n(a.value().data() + idx[r] * v.inner, v.inner, out.data() + r * v.inner);
  }
  const auto ia = a.id();
  const std::size_t inner = v.inner;
  return a.tape().record(std::move(out), {a}, [ia, idx, inner](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t r = 0; r < idx.size(); ++r) {
        T* dst = s->data() + idx[r] * inner;
        const T* src = g.data() + r * inner;
        for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
  });
}

// ---------------------------------------------------------------------------
// Normalisation / attention

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  require_rank(a.shape(), 2, "softmax_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    const T hi = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - hi));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  const auto ia = a.id();
  auto& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, m, n](Tape<T>& t, const Tensor<T>& g) {
    auto* s = t.grad_sink(ia);
    if (!s) return;
    const auto& y = t.value(io);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) (*s)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

template <typename T>
Var<T> masked_softmax_rows(Var<T> a, std::span<const std::uint8_t> mask, Var<T> log_tau) {
  require_rank(a.shape(), 2, "masked_softmax_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (mask.size() != m * n) throw ShapeError("masked_softmax_rows: mask size does not match scores");
  if (log_tau.value().size() != 1) throw ShapeError("masked_softmax_rows: log temperature must be a scalar");
  const T tau = std::exp(log_tau.value()[0]);
  if (!(tau > T{0}) || !std::isfinite(tau)) throw DomainError("masked_softmax_rows: temperature must be positive");
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  Tensor<T> out({m, n});
  const auto& x = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (keep[i * n + j]) hi = std::max(hi, x[i * n + j] / tau);
    if (!std::isfinite(hi)) throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " fully masked");
    T z{0};
    for (std::size_t j = 0; j < n; ++j)
      if (keep[i * n + j]) z += (out[i * n + j] = std::exp(x[i * n + j] / tau - hi));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  const auto ia = a.id(), it = log_tau.id();
  auto& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a, log_tau}, [ia, it, io, m, n, tau](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(io);
    const auto& x = t.value(ia);
    auto* sa = t.grad_sink(ia);
    auto* st = t.grad_sink(it);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const T du = y[i * n + j] * (g[i * n + j] - dot);
        if (sa) (*sa)[i * n + j] += du / tau;
        // u = x * exp(-log_tau)  =>  du/dlog_tau = -u
        if (st) (*st)[0] -= du * x[i * n + j] / tau;
      }
    }
  });
}

template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_rank(x.shape(), 2, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layer_norm_rows: gamma/beta length must equal " + std::to_string(n));
  }
  Tensor<T> xhat({m, n});
  std::vector<T> inv_std(m);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xv[i * n + j] - mu) * (xv[i * n + j] - mu);
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
  }
  Tensor<T> out({m, n});
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = t.value(ig);
        if (auto* s = t.grad_sink(ig))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*s)[j] += g[i * n + j] * xhat[i * n + j];
        if (auto* s = t.grad_sink(ib))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*s)[j] += g[i * n + j];
        if (auto* s = t.grad_sink(ix)) {
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gv[j];
              (*s)[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Image kernels

namespace {

struct ConvGeometry {
  std::size_t C, H, W, K, stride, pad, OH, OW;
  std::size_t rows() const { return C * K * K; }
  std::size_t cols() const { return OH * OW; }
};

// Unfolds one image [C, H, W] into [C*K*K, OH*OW]; padded taps read as zero.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.K; ++ky)
      for (std::size_t kx = 0; kx < g.K; ++kx) {
        T* dst = cols + ((c * g.K + ky) * g.K + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          const std::size_t iy = oy * g.stride + ky;
          T* drow = dst + oy * g.OW;
          if (iy < g.pad || iy - g.pad >= g.H) {
            std::fill(drow, drow + g.OW, T{0});
            continue;
          }
          const T* xrow = x + (c * g.H + iy - g.pad) * g.W;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const std::size_t ix = ox * g.stride + kx;
            drow[ox] = (ix < g.pad || ix - g.pad >= g.W) ? T{0} : xrow[ix - g.pad];
          }
        }
      }
}

// Adjoint of im2col: scatters [C*K*K, OH*OW] back onto [C, H, W].
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.K; ++ky)
      for (std::size_t kx = 0; kx < g.K; ++kx) {
        const T* src = cols + ((c * g.K + ky) * g.K + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          const std::size_t iy = oy * g.stride + ky;
          if (iy < g.pad || iy - g.pad >= g.H) continue;
          T* xrow = x + (c * g.H + iy - g.pad) * g.W;
          const T* srow = src + oy * g.OW;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const std::size_t ix = ox * g.stride + kx;
            if (ix >= g.pad && ix - g.pad < g.W) xrow[ix - g.pad] += srow[ox];
          }
        }
      }
}

// out[m, :] += sum_r a[m, r] * b[r, :] for row-major a [M, R], b [R, P].
template <typename T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t M, std::size_t R, std::size_t P) {
  for (std::size_t m = 0; m < M; ++m) {
    T* orow = out + m * P;
    for (std::size_t r = 0; r < R; ++r) {
      const T av = a[m * R + r];
      const T* brow = b + r * P;
      for (std::size_t j = 0; j < P; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[4] = {T{0}, T{0}, T{0}, T{0}};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += a[i] * b[i];
    acc[1] += a[i + 1] * b[i + 1];
    acc[2] += a[i + 2] * b[i + 2];
    acc[3] += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(w.shape(), 4, "conv2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != K) {
    throw ShapeError("conv2d: weight " + shape_string(w.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  if (b.value().size() != O) throw ShapeError("conv2d: bias length must equal output channels");
  if (stride == 0 || H + 2 * pad < K || W + 2 * pad < K) throw ShapeError("conv2d: kernel larger than padded input");
  const ConvGeometry geo{C, H, W, K, stride, pad, (H + 2 * pad - K) / stride + 1, (W + 2 * pad - K) / stride + 1};
  const std::size_t R = geo.rows(), P = geo.cols();

  Tensor<T> out({N, O, geo.OH, geo.OW});
  const T* X = x.value().data();
  const T* Wt = w.value().data();
  const T* B = b.value().data();
  std::vector<T> cols(R * P);
  for (std::size_t n = 0; n < N; ++n) {
    T* y = out.data() + n * O * P;
    for (std::size_t o = 0; o < O; ++o) std::fill(y + o * P, y + (o + 1) * P, B[o]);
    im2col(X + n * C * H * W, geo, cols.data());
    gemm_acc(Wt, cols.data(), y, O, R, P);
  }

  const auto ixd = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, w, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const T* X = t.value(ixd).data();
    const T* Wt = t.value(iw).data();
    const T* G = g.data();
    auto* sx = t.grad_sink(ixd);
    auto* sw = t.grad_sink(iw);
    if (auto* sb = t.grad_sink(ib))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const T* gplane = G + (n * O + o) * P;
          T acc{0};
          for (std::size_t i = 0; i < P; ++i) acc += gplane[i];
          (*sb)[o] += acc;
        }
    if (!sx && !sw) return;
    // W^T as [R, O] so the input gradient is another row-major accumulate.
    std::vector<T> wt(R * O);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t r = 0; r < R; ++r) wt[r * O + o] = Wt[o * R + r];
    std::vector<T> cols(R * P), dcols(sx ? R * P : 0);
    for (std::size_t n = 0; n < N; ++n) {
      const T* gn = G + n * O * P;
      if (sw) {
        im2col(X + n * C * H * W, geo, cols.data());
        T* dw = sw->data();
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t r = 0; r < R; ++r) dw[o * R + r] += dot(gn + o * P, cols.data() + r * P, P);
      }
      if (sx) {
        std::fill(dcols.begin(), dcols.end(), T{0});
        gemm_acc(wt.data(), gn, dcols.data(), R, O, P);
        col2im_add(dcols.data(), geo, sx->data() + n * C * H * W);
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor) {
  require_rank(x.shape(), 4, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = H * factor, OW = W * factor;
  Tensor<T> out({N, C, OH, OW});
  const T* X = x.value().data();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox)
        out[(p * OH + oy) * OW + ox] = X[(p * H + oy / factor) * W + ox / factor];
  const auto ia = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t oy = 0; oy < OH; ++oy)
          for (std::size_t ox = 0; ox < OW; ++ox)
            (*s)[(p * H + oy / factor) * W + ox / factor] += g[(p * OH + oy) * OW + ox];
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C});
  const T* X = x.value().data();
  for (std::size_t p = 0; p < N * C; ++p) {
    T acc{0};
    for (std::size_t i = 0; i < area; ++i) acc += X[p * area + i];
    out[p] = acc / static_cast<T>(area);
  }
  const auto ia = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (auto* s = t.grad_sink(ia))
      for (std::size_t p = 0; p < N * C; ++p) {
        const T v = g[p] / static_cast<T>(area);
        for (std::size_t i = 0; i < area; ++i) (*s)[p * area + i] += v;
      }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint8_t> targets) {
  require_rank(logits.shape(), 4, "cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1), area = logits.dim(2) * logits.dim(3);
  if (targets.size() != N * area) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(N * area) +
                     " pixels");
  }
  if (N * area == 0) throw ShapeError("cross_entropy: no pixels");
  const T* L = logits.value().data();
  // Probabilities are stored for the backward pass.
  std::vector<T> prob(N * K * area);
  T total{0};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < area; ++i) {
      const std::uint8_t target = targets[n * area + i];
      if (target >= K) {
        throw LabelError("cross_entropy: class " + std::to_string(target) + " out of range for k=" +
                         std::to_string(K));
      }
      T hi = L[(n * K) * area + i];
      for (std::size_t c = 1; c < K; ++c) hi = std::max(hi, L[(n * K + c) * area + i]);
      T z{0};
      for (std::size_t c = 0; c < K; ++c) z += (prob[(n * K + c) * area + i] = std::exp(L[(n * K + c) * area + i] - hi));
      for (std::size_t c = 0; c < K; ++c) prob[(n * K + c) * area + i] /= z;
      total += std::log(z) + hi - L[(n * K + target) * area + i];
    }
  const T count = static_cast<T>(N * area);
  const auto il = logits.id();
  std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
  return logits.tape().record(
      Tensor<T>({1}, total / count), {logits},
      [=, prob = std::move(prob), tgt = std::move(tgt)](Tape<T>& t, const Tensor<T>& g) {
        auto* s = t.grad_sink(il);
        if (!s) return;
        const T f = g[0] / count;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < K; ++c)
            for (std::size_t i = 0; i < area; ++i) {
              const std::size_t idx = (n * K + c) * area + i;
              const T onehot = tgt[n * area + i] == c ? T{1} : T{0};
              (*s)[idx] += f * (prob[idx] - onehot);
            }
      });
}

// ---------------------------------------------------------------------------
// Instantiations

#define CTXSEG_AD_INSTANTIATE(T)                                                                  \
  template class Tape<T>;                                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> sub(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                               \
  template Var<T> relu(Var<T>);                                                                   \
  template Var<T> exp(Var<T>);                                                                    \
  template Var<T> add_row(Var<T>, Var<T>);                                                        \
  template Var<T> mul_row(Var<T>, Var<T>);                                                        \
  template Var<T> matmul(Var<T>, Var<T>);                                                         \
  template Var<T> transpose(Var<T>);                                                              \
  template Var<T> reshape(Var<T>, Shape);                                                         \
  template Var<T> sum(Var<T>);                                                                    \
  template Var<T> mean(Var<T>);                                                                   \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                           \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                                   \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                              \
  template Var<T> softmax_rows(Var<T>);                                                           \
  template Var<T> masked_softmax_rows(Var<T>, std::span<const std::uint8_t>, Var<T>);             \
  template Var<T> layer_norm_rows(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                       \
  template Var<T> upsample_nearest(Var<T>, std::size_t);                                          \
  template Var<T> global_avg_pool(Var<T>);                                                        \
  template Var<T> cross_entropy(Var<T>, std::span<const std::uint8_t>);

CTXSEG_AD_INSTANTIATE(float)
CTXSEG_AD_INSTANTIATE(double)

#undef CTXSEG_AD_INSTANTIATE

}  // namespace ctxseg::ad
