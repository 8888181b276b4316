#pragma once

#include <cmath>
#include <string>

#include "ctxseg/error.hpp"
#include "ctxseg/numerics.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg::detail {

inline std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Xavier-uniform draw seeded by (seed, name), so a parameter's initial value
// does not depend on which other parameters exist.
template <typename T>
void add_uniform(ParamStore<T>& store, const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                 std::uint64_t seed) {
  Rng rng(derive_seed(seed, name_hash(name)));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  store[name] = std::move(t);
}

// He-uniform draw for weights feeding a ReLU: keeps the activation second
// moment roughly constant through the layer.
template <typename T>
void add_he_uniform(ParamStore<T>& store, const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name_hash(name)));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  store[name] = std::move(t);
}

template <typename T>
void add_constant(ParamStore<T>& store, const std::string& name, Shape shape, T value) {
  store[name] = Tensor<T>(std::move(shape), value);
}

template <typename T>
const ad::Var<T>& param(const ParamVars<T>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

}  // namespace ctxseg::detail
