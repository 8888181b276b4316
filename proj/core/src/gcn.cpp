#include "ctxseg/gcn.hpp"

#include <cmath>
#include <string>

#include "ctxseg/error.hpp"
#include "init.hpp"

namespace ctxseg {

using detail::param;

template <typename T>
void init_featurizer_params(ParamStore<T>& store, std::size_t hidden, std::uint64_t seed) {
  if (hidden < 4 || hidden % 4 != 0) throw ConfigError("featurizer hidden width must be a positive multiple of 4");
  const std::size_t widths[] = {3, hidden / 4, hidden / 2, hidden};
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string base = "featurizer.conv" + std::to_string(s + 1);
    const std::size_t in = widths[s], out = widths[s + 1];
    detail::add_he_uniform(store, base + ".weight", {out, in, 3, 3}, in * 9, seed);
    detail::add_constant(store, base + ".bias", {out}, T{0});
  }
  detail::add_uniform(store, "featurizer.proj.weight", {hidden, hidden}, hidden, hidden, seed);
  detail::add_constant(store, "featurizer.proj.bias", {hidden}, T{0});
}

template <typename T>
ad::Var<T> featurize_nodes(const ParamVars<T>& params, ad::Var<T> pixels, std::size_t hidden) {
  if (pixels.shape().size() != 4 || pixels.dim(1) != 3 || pixels.dim(2) != pixels.dim(3)) {
    throw ShapeError("featurize_nodes: expected [N, 3, P, P] tiles, got " + shape_string(pixels.shape()));
  }
  ad::Var<T> h = pixels;
  for (int s = 1; s <= 3; ++s) {
    const std::string base = "featurizer.conv" + std::to_string(s);
    h = ad::relu(ad::conv2d(h, param(params, base + ".weight"), param(params, base + ".bias"), 2, 1));
  }
  h = ad::global_avg_pool(h);
  if (h.dim(1) != hidden) throw ShapeError("featurize_nodes: parameter widths do not match hidden size");
  return ad::add_row(ad::matmul(h, param(params, "featurizer.proj.weight")), param(params, "featurizer.proj.bias"));
}

template <typename T>
void init_gcn_params(ParamStore<T>& store, const GcnConfig& config, std::uint64_t seed) {
  for (std::size_t t = 0; t < config.layers; ++t) {
    const std::string base = "gcn." + std::to_string(t);
    if (t + 1 < config.layers) {
      detail::add_he_uniform(store, base + ".weight", {config.hidden, config.hidden}, config.hidden, seed);
    } else {
      detail::add_uniform(store, base + ".weight", {config.hidden, config.hidden}, config.hidden, config.hidden, seed);
    }
    if (config.aggregation == Aggregation::SoftmaxTemperature) {
      detail::add_constant(store, base + ".log_tau", {1}, T{0});
    }
  }
}

namespace {

template <typename T>
ad::Var<T> activate(ad::Var<T> v, Activation act) {
  return act == Activation::Relu ? ad::relu(v) : v;
}

}  // namespace

template <typename T>
ad::Var<T> gcn_layer(ad::Var<T> x, ad::Var<T> adj, ad::Var<T> w, Activation act) {
  return activate(ad::matmul(ad::matmul(adj, x), w), act);
}

template <typename T>
ad::Var<T> aggregation_weights(ad::Var<T> x, std::span<const std::uint8_t> mask, ad::Var<T> log_tau) {
  const T inv_sqrt_l = T{1} / std::sqrt(static_cast<T>(x.dim(1)));
  const auto scores = ad::scale(ad::matmul(x, ad::transpose(x)), inv_sqrt_l);
  return ad::masked_softmax_rows(scores, mask, log_tau);
}

template <typename T>
ad::Var<T> softmax_aggregate(ad::Var<T> x, std::span<const std::uint8_t> mask, ad::Var<T> w, ad::Var<T> log_tau,
                             Activation act) {
  const auto alpha = aggregation_weights(x, mask, log_tau);
  return activate(ad::matmul(ad::matmul(alpha, x), w), act);
}

template <typename T>
ad::Var<T> gcn_forward(const ParamVars<T>& params, ad::Var<T> x0, const ContextGraph& graph,
                       const GcnConfig& config) {
  if (config.layers == 0) return x0;
  if (x0.shape().size() != 2 || x0.dim(0) != graph.node_count()) {
    throw ShapeError("gcn_forward: features " + shape_string(x0.shape()) + " do not match " +
                     std::to_string(graph.node_count()) + " nodes");
  }
  auto& tape = x0.tape();
  ad::Var<T> adj;
  std::vector<std::uint8_t> mask;
  if (config.aggregation == Aggregation::Symmetric) {
    adj = tape.constant(graph.normalized_adjacency().template cast<T>());
  } else {
    mask = graph.closed_neighborhood_mask();
  }
  ad::Var<T> x = x0;
  for (std::size_t t = 0; t < config.layers; ++t) {
    const std::string base = "gcn." + std::to_string(t);
    const Activation act = t + 1 == config.layers ? Activation::Identity : Activation::Relu;
    if (config.aggregation == Aggregation::Symmetric) {
      x = gcn_layer(x, adj, param(params, base + ".weight"), act);
    } else {
      x = softmax_aggregate<T>(x, mask, param(params, base + ".weight"), param(params, base + ".log_tau"), act);
    }
  }
  return x;
}

template <typename T>
Tensor<T> gcn_layer(const Tensor<T>& x, const Tensor<T>& adj, const Tensor<T>& w, Activation act) {
  ad::Tape<T> tape;
  return gcn_layer(tape.constant(x), tape.constant(adj), tape.constant(w), act).value();
}

template <typename T>
Tensor<T> gcn_forward(const Tensor<T>& x0, const ContextGraph& graph, const ParamStore<T>& params,
                      const GcnConfig& config) {
  ad::Tape<T> tape;
  const auto vars = bind_params(tape, params, [](const std::string&) { return false; });
  return gcn_forward(vars, tape.constant(x0), graph, config).value();
}

#define CTXSEG_GCN_INSTANTIATE(T)                                                                                \
  template void init_featurizer_params(ParamStore<T>&, std::size_t, std::uint64_t);                              \
  template ad::Var<T> featurize_nodes(const ParamVars<T>&, ad::Var<T>, std::size_t);                             \
  template void init_gcn_params(ParamStore<T>&, const GcnConfig&, std::uint64_t);                                \
  template ad::Var<T> gcn_layer(ad::Var<T>, ad::Var<T>, ad::Var<T>, Activation);                                 \
  template ad::Var<T> softmax_aggregate(ad::Var<T>, std::span<const std::uint8_t>, ad::Var<T>, ad::Var<T>,       \
                                       Activation);                                                              \
  template ad::Var<T> aggregation_weights(ad::Var<T>, std::span<const std::uint8_t>, ad::Var<T>);                \
  template ad::Var<T> gcn_forward(const ParamVars<T>&, ad::Var<T>, const ContextGraph&, const GcnConfig&);       \
  template Tensor<T> gcn_layer(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Activation);                \
  template Tensor<T> gcn_forward(const Tensor<T>&, const ContextGraph&, const ParamStore<T>&, const GcnConfig&);

CTXSEG_GCN_INSTANTIATE(float)
CTXSEG_GCN_INSTANTIATE(double)

}  // namespace ctxseg
