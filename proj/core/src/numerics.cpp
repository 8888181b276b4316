#include "ctxseg/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "ctxseg/error.hpp"

namespace ctxseg {

std::string to_string(Precision p) { return p == Precision::Float64 ? "f64" : "f32"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "float32" || text == "32") return Precision::Float32;
  if (text == "f64" || text == "float64" || text == "64") return Precision::Float64;
  throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

template <typename T>
std::vector<T> softmax_temp(std::span<const T> u, T tau) {
  if (!(tau > T{0}) || !std::isfinite(tau)) throw DomainError("softmax_temp: temperature must be positive and finite");
  if (u.empty()) return {};
  std::vector<T> out(u.size());
  T hi = u[0] / tau;
  for (T v : u) {
    if (!std::isfinite(v)) throw DomainError("softmax_temp: non-finite input");
    hi = std::max(hi, v / tau);
  }
  T z{0};
  for (std::size_t i = 0; i < u.size(); ++i) z += (out[i] = std::exp(u[i] / tau - hi));
  for (auto& v : out) v /= z;
  return out;
}

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta, T eps) {
  if (x.empty() || gamma.size() != x.size() || beta.size() != x.size()) {
    throw ShapeError("layer_norm: x, gamma, beta must share a non-zero length");
  }
  const T n = static_cast<T>(x.size());
  T mu{0};
  for (T v : x) mu += v;
  mu /= n;
  T var{0};
  for (T v : x) var += (v - mu) * (v - mu);
  var /= n;
  const T inv = T{1} / std::sqrt(var + eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * (x[i] - mu) * inv + beta[i];
  return out;
}

template <typename T>
ParamVars<T> bind_params(ad::Tape<T>& tape, const ParamStore<T>& params,
                         const std::function<bool(const std::string&)>& trainable) {
  ParamVars<T> vars;
  for (const auto& [name, value] : params) {
    const bool learn = !trainable || trainable(name);
    vars.emplace(name, learn ? tape.parameter(value) : tape.constant(value));
  }
  return vars;
}

template std::vector<float> softmax_temp(std::span<const float>, float);
template std::vector<double> softmax_temp(std::span<const double>, double);
template std::vector<float> layer_norm(std::span<const float>, std::span<const float>, std::span<const float>, float);
template std::vector<double> layer_norm(std::span<const double>, std::span<const double>, std::span<const double>,
                                        double);
template ParamVars<float> bind_params(ad::Tape<float>&, const ParamStore<float>&,
                                      const std::function<bool(const std::string&)>&);
template ParamVars<double> bind_params(ad::Tape<double>&, const ParamStore<double>&,
                                       const std::function<bool(const std::string&)>&);

double GradReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossBuilder& loss, const ParamStore<double>& params) {
  ad::Tape<double> tape;
  auto vars = bind_params(tape, params);
  const auto out = loss(tape, vars);
  if (out.value().size() != 1) throw ShapeError("grad_check: loss must be a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw EvaluationError("grad_check: loss evaluated to a non-finite value");
  return v;
}

}  // namespace

GradReport grad_check(const LossBuilder& loss, const ParamStore<double>& params, double h, std::size_t max_coords) {
  if (!(h > 0.0)) throw DomainError("grad_check: step must be positive");
  ad::Tape<double> tape;
  auto vars = bind_params(tape, params);
  const auto root = loss(tape, vars);
  if (root.value().size() != 1) throw ShapeError("grad_check: loss must be a scalar");
  if (!std::isfinite(root.value()[0])) throw EvaluationError("grad_check: loss evaluated to a non-finite value");
  tape.backward(root);

  GradReport report;
  ParamStore<double> probe = params;
  for (const auto& [name, value] : params) {
    GradEntry entry;
    entry.name = name;
    const Tensor<double> analytic = tape.grad(vars.at(name));
    std::vector<std::size_t> coords;
    const std::size_t n = value.size();
    if (max_coords == 0 || max_coords >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(i * n / max_coords);
    }
    Tensor<double>& slot = probe.at(name);
    for (std::size_t i : coords) {
      const double saved = slot[i];
      slot[i] = saved + h;
      const double up = evaluate(loss, probe);
      slot[i] = saved - h;
      const double down = evaluate(loss, probe);
      slot[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      entry.analytic.push_back(analytic[i]);
      entry.numeric.push_back(numeric);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ctxseg
