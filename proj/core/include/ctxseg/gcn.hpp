#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/graph.hpp"
#include "ctxseg/model_config.hpp"
#include "ctxseg/numerics.hpp"

namespace ctxseg {

enum class Activation { Identity, Relu };

// ---------------------------------------------------------------------------
// Node featuriser: three stride-2 3x3 convolutions (widths L/4, L/2, L) with
// ReLU, global average pooling and a linear map, giving one R^L row per tile.

template <typename T>
void init_featurizer_params(ParamStore<T>& store, std::size_t hidden, std::uint64_t seed);

// pixels: [N, 3, P, P] -> [N, L]
template <typename T>
ad::Var<T> featurize_nodes(const ParamVars<T>& params, ad::Var<T> pixels, std::size_t hidden);

// ---------------------------------------------------------------------------
// Contextual aggregation

struct GcnConfig {
  std::size_t layers = 3;
  std::size_t hidden = 32;
  Aggregation aggregation = Aggregation::Symmetric;
};

// Parameters gcn.<t>.weight (L x L) and, in softmax mode, gcn.<t>.log_tau
// initialised to 0 (temperature 1).
template <typename T>
void init_gcn_params(ParamStore<T>& store, const GcnConfig& config, std::uint64_t seed);

// sigma(adj X W)
template <typename T>
ad::Var<T> gcn_layer(ad::Var<T> x, ad::Var<T> adj, ad::Var<T> w, Activation act);

// sigma(alpha X W), alpha = masked row softmax of (X X^T / sqrt(L)) / exp(log_tau)
// over the closed neighbourhood mask.
template <typename T>
ad::Var<T> softmax_aggregate(ad::Var<T> x, std::span<const std::uint8_t> mask, ad::Var<T> w, ad::Var<T> log_tau,
                             Activation act);

// The attention matrix alpha of softmax_aggregate, exposed for inspection.
template <typename T>
ad::Var<T> aggregation_weights(ad::Var<T> x, std::span<const std::uint8_t> mask, ad::Var<T> log_tau);

// T stacked layers: ReLU on hidden layers, identity on the last. T = 0
// returns x0 unchanged.
template <typename T>
ad::Var<T> gcn_forward(const ParamVars<T>& params, ad::Var<T> x0, const ContextGraph& graph,
                       const GcnConfig& config);

// Value-level conveniences built on a private tape.
template <typename T>
Tensor<T> gcn_layer(const Tensor<T>& x, const Tensor<T>& adj, const Tensor<T>& w, Activation act);
template <typename T>
Tensor<T> gcn_forward(const Tensor<T>& x0, const ContextGraph& graph, const ParamStore<T>& params,
                      const GcnConfig& config);

}  // namespace ctxseg
