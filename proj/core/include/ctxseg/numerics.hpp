#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/tensor.hpp"

namespace ctxseg {

// Numeric mode of a run: Float64 for verification, Float32 for training.
enum class Precision { Float32, Float64 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

inline constexpr double kLayerNormEps = 1e-5;

// softmax(u / tau), stabilised by subtracting max(u / tau).
template <typename T>
std::vector<T> softmax_temp(std::span<const T> u, T tau);

// gamma * (x - mean) / sqrt(var + eps) + beta with the population variance.
template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                          T eps = static_cast<T>(kLayerNormEps));

// Named parameter tensors, iterated in name order.
template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

template <typename T>
using ParamVars = std::map<std::string, ad::Var<T>>;

// Binds every parameter on `tape`. Names for which `trainable` returns false
// are bound as constants.
template <typename T>
ParamVars<T> bind_params(ad::Tape<T>& tape, const ParamStore<T>& params,
                         const std::function<bool(const std::string&)>& trainable = {});

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params) {
  ParamStore<To> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<To>());
  return out;
}

// ---------------------------------------------------------------------------
// Central-difference gradient verification (64-bit only).

// Relative error |a - n| / max(|a|, |n|, kGradCheckFloor). With h = 1e-6 and
// O(1) losses, rounding alone leaves central differences off by up to ~4e-9
// in absolute terms, so gradients below the floor are compared absolutely.
inline constexpr double kGradCheckFloor = 1e-3;

struct GradEntry {
  std::string name;
  std::vector<double> analytic;
  std::vector<double> numeric;
  double max_rel_error = 0.0;
};

struct GradReport {
  std::vector<GradEntry> entries;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

using LossBuilder = std::function<ad::Var<double>(ad::Tape<double>&, const ParamVars<double>&)>;

double relative_error(double analytic, double numeric, double floor = kGradCheckFloor);

// Compares tape gradients of the scalar returned by `loss` against
// (f(theta + h) - f(theta - h)) / 2h for every coordinate of every parameter.
// `max_coords` > 0 limits the check to that many evenly spaced coordinates per
// parameter. Throws EvaluationError on a non-finite loss.
GradReport grad_check(const LossBuilder& loss, const ParamStore<double>& params, double h = 1e-6,
                      std::size_t max_coords = 0);

}  // namespace ctxseg
