#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/graph.hpp"
#include "ctxseg/model_config.hpp"
#include "ctxseg/numerics.hpp"
#include "ctxseg/synthwsi.hpp"

namespace ctxseg {

// Pixel scaling applied before the featuriser and the encoder.
inline constexpr double kPixelCenter = 128.0;
inline constexpr double kPixelScale = 64.0;

// Block-averages each channel over factor x factor cells, then replicates the
// cell mean back to full resolution. factor 1 is the identity; the factor
// must divide the tile side.
RgbImage coarsen(const RgbImage& tile, std::size_t factor);

// One slide ready for the network: graph over foreground tiles, normalised
// tile pixels and per-node label rasters. Node i is grid.tiles[tile_index[i]].
template <typename T>
struct PreparedSlide {
  std::uint64_t slide_id = 0;
  std::size_t patch = 0;
  ContextGraph graph;
  std::vector<std::size_t> tile_index;
  Tensor<T> pixels;                   // [N, 3, P, P]
  std::vector<std::uint8_t> labels;   // N * P * P

  std::size_t node_count() const { return tile_index.size(); }
};

// Throws EmptyGraphError when the grid has no foreground tile.
template <typename T>
PreparedSlide<T> prepare_slide(const TileGrid& grid, std::size_t granularity = 1);

// Stacks the tile pixels of `nodes` into [B, 3, P, P] and their labels.
template <typename T>
Tensor<T> gather_pixels(const PreparedSlide<T>& slide, std::span<const std::size_t> nodes);
template <typename T>
std::vector<std::uint8_t> gather_labels(const PreparedSlide<T>& slide, std::span<const std::size_t> nodes);

// Every parameter of the configured network, deterministically from `seed`.
template <typename T>
ParamStore<T> init_model_params(const ModelConfig& config, std::uint64_t seed);

bool is_featurizer_param(const std::string& name);

// Context rows [N, L] for every node: featuriser followed by T GCN layers.
template <typename T>
ad::Var<T> context_features(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                            const ModelConfig& config);

// Segmentation logits [B, k, P, P] for target nodes of one slide.
template <typename T>
ad::Var<T> forward_targets(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                           std::span<const std::size_t> targets, const ModelConfig& config);

// Same, with precomputed context rows [B, L] aligned with `targets`
// (ignored when the strategy uses no context).
template <typename T>
ad::Var<T> forward_with_context(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                                std::span<const std::size_t> targets, ad::Var<T> context, const ModelConfig& config);

// Per-pixel argmax, ties to the lowest class. logits: [B, k, P, P] ->
// B label rasters of P x P.
template <typename T>
std::vector<LabelImage> argmax_masks(const Tensor<T>& logits);

// Inference over every node of a slide, in chunks of `batch` targets.
template <typename T>
std::vector<LabelImage> predict_slide(const ParamStore<T>& params, const PreparedSlide<T>& slide,
                                      const ModelConfig& config, std::size_t batch = 32);

}  // namespace ctxseg
