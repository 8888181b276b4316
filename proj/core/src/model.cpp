#include "ctxseg/model.hpp"

#include <algorithm>
#include <string>

#include "ctxseg/codec.hpp"
#include "ctxseg/error.hpp"
#include "ctxseg/fusion.hpp"
#include "ctxseg/gcn.hpp"

namespace ctxseg {

RgbImage coarsen(const RgbImage& tile, std::size_t factor) {
  if (factor == 0 || tile.width % factor != 0 || tile.height % factor != 0) {
    throw ShapeError("coarsen: factor " + std::to_string(factor) + " does not divide a " +
                     std::to_string(tile.width) + "x" + std::to_string(tile.height) + " tile");
  }
  if (factor == 1) return tile;
  RgbImage out(tile.width, tile.height);
  const unsigned cell = static_cast<unsigned>(factor * factor);
  for (std::size_t by = 0; by < tile.height; by += factor) {
    for (std::size_t bx = 0; bx < tile.width; bx += factor) {
      for (std::size_t c = 0; c < 3; ++c) {
        unsigned total = 0;
        for (std::size_t y = by; y < by + factor; ++y) {
          for (std::size_t x = bx; x < bx + factor; ++x) total += tile.at(x, y)[c];
        }
        const auto mean = static_cast<std::uint8_t>((total + cell / 2) / cell);
        for (std::size_t y = by; y < by + factor; ++y) {
          for (std::size_t x = bx; x < bx + factor; ++x) out.at(x, y)[c] = mean;
        }
      }
    }
  }
  return out;
}

template <typename T>
PreparedSlide<T> prepare_slide(const TileGrid& grid, std::size_t granularity) {
  PreparedSlide<T> out;
  out.slide_id = grid.slide_id;
  out.patch = grid.patch;
  out.graph = build_context_graph(grid);
  out.tile_index = grid.foreground_indices();
  const std::size_t n = out.tile_index.size(), p = grid.patch, plane = p * p;
  out.pixels = Tensor<T>({n, 3, p, p});
  out.labels.resize(n * plane);
  const T center = static_cast<T>(kPixelCenter), inv_scale = static_cast<T>(1.0 / kPixelScale);
  for (std::size_t i = 0; i < n; ++i) {
    const Tile& tile = grid.tiles[out.tile_index[i]];
    const RgbImage px = coarsen(tile.pixels, granularity);
    T* dst = out.pixels.data() + i * 3 * plane;
    for (std::size_t k = 0; k < plane; ++k) {
      for (std::size_t c = 0; c < 3; ++c) dst[c * plane + k] = (static_cast<T>(px.pixels[k * 3 + c]) - center) * inv_scale;
    }
    std::copy(tile.labels.values.begin(), tile.labels.values.end(), out.labels.begin() + i * plane);
  }
  return out;
}

template <typename T>
Tensor<T> gather_pixels(const PreparedSlide<T>& slide, std::span<const std::size_t> nodes) {
  const std::size_t p = slide.patch, block = 3 * p * p;
  Tensor<T> out({nodes.size(), 3, p, p});
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] >= slide.node_count()) throw IndexError("gather_pixels: node " + std::to_string(nodes[i]));
    std::copy_n(slide.pixels.data() + nodes[i] * block, block, out.data() + i * block);
  }
  return out;
}

template <typename T>
std::vector<std::uint8_t> gather_labels(const PreparedSlide<T>& slide, std::span<const std::size_t> nodes) {
  const std::size_t plane = slide.patch * slide.patch;
  std::vector<std::uint8_t> out(nodes.size() * plane);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] >= slide.node_count()) throw IndexError("gather_labels: node " + std::to_string(nodes[i]));
    std::copy_n(slide.labels.begin() + nodes[i] * plane, plane, out.begin() + i * plane);
  }
  return out;
}

namespace {

GcnConfig gcn_config(const ModelConfig& config) {
  return GcnConfig{config.gcn_layers, config.hidden, config.aggregation};
}

}  // namespace

template <typename T>
ParamStore<T> init_model_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore<T> store;
  if (config.uses_context()) {
    init_featurizer_params(store, config.hidden, seed);
    init_gcn_params(store, gcn_config(config), seed);
  }
  init_codec_params(store, config, seed);
  init_fusion_params(store, config, seed);
  return store;
}

bool is_featurizer_param(const std::string& name) { return name.rfind("featurizer.", 0) == 0; }

template <typename T>
ad::Var<T> context_features(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                            const ModelConfig& config) {
  const auto x0 = featurize_nodes(params, tape.constant(slide.pixels), config.hidden);
  return gcn_forward(params, x0, slide.graph, gcn_config(config));
}

template <typename T>
ad::Var<T> forward_with_context(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                                std::span<const std::size_t> targets, ad::Var<T> context, const ModelConfig& config) {
  if (targets.empty()) throw ContractError("forward_targets: no target nodes");
  if (slide.patch != config.patch) {
    throw ConfigError("forward_targets: slide patch " + std::to_string(slide.patch) + " differs from model patch " +
                      std::to_string(config.patch));
  }
  const auto enc = encode_patches(params, tape.constant(gather_pixels(slide, targets)), config);
  const std::size_t b = config.token_grid();
  std::vector<ad::Var<T>> fused;
  fused.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto z_d = tokens_of(enc.map, i);
    if (!config.uses_context()) {
      fused.push_back(tokens_to_map(z_d, b));
      continue;
    }
    const auto z_c = ad::slice(context, 0, i, i + 1);
    fused.push_back(tokens_to_map(fuse(params, z_c, z_d, config), b));
  }
  const auto map = fused.size() == 1 ? fused[0] : ad::concat(std::span<const ad::Var<T>>(fused), 0);
  return decode_tokens(params, map, enc.skip1, enc.skip2, config);
}

template <typename T>
ad::Var<T> forward_targets(const ParamVars<T>& params, ad::Tape<T>& tape, const PreparedSlide<T>& slide,
                           std::span<const std::size_t> targets, const ModelConfig& config) {
  ad::Var<T> context;  // rows aligned with `targets`
  if (config.uses_context()) {
    if (config.gcn_layers == 0) {
      // Without message passing only the targets' own features are needed.
      context = featurize_nodes(params, tape.constant(gather_pixels(slide, targets)), config.hidden);
    } else {
      context = ad::gather_rows(context_features(params, tape, slide, config), targets);
    }
  }
  return forward_with_context(params, tape, slide, targets, context, config);
}

template <typename T>
std::vector<LabelImage> argmax_masks(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_masks: expected [B, k, H, W], got " + shape_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3), plane = h * w;
  std::vector<LabelImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    LabelImage mask(w, h);
    const T* base = logits.data() + i * k * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (base[c * plane + px] > base[best * plane + px]) best = c;
      }
      mask.values[px] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(mask));
  }
  return out;
}

template <typename T>
std::vector<LabelImage> predict_slide(const ParamStore<T>& params, const PreparedSlide<T>& slide,
                                      const ModelConfig& config, std::size_t batch) {
  if (batch == 0) throw ConfigError("predict_slide: batch must be positive");
  ad::Tape<T> tape;
  const auto vars = bind_params(tape, params, [](const std::string&) { return false; });

  // Context rows once for the whole slide, then chunks of targets.
  ad::Var<T> context;
  const bool slide_context = config.uses_context() && config.gcn_layers > 0;
  if (slide_context) context = context_features(vars, tape, slide, config);

  std::vector<LabelImage> out;
  out.reserve(slide.node_count());
  for (std::size_t begin = 0; begin < slide.node_count(); begin += batch) {
    const std::size_t end = std::min(slide.node_count(), begin + batch);
    std::vector<std::size_t> nodes(end - begin);
    for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = begin + i;
    // A fresh tape per chunk keeps intermediate activations bounded.
    ad::Tape<T> chunk;
    const auto chunk_vars = bind_params(chunk, params, [](const std::string&) { return false; });
    const std::span<const std::size_t> targets(nodes);
    const Tensor<T> logits =
        slide_context
            ? forward_with_context(chunk_vars, chunk, slide, targets,
                                   chunk.constant(ad::gather_rows(context, targets).value()), config)
                  .value()
            : forward_targets(chunk_vars, chunk, slide, targets, config).value();
    for (auto& m : argmax_masks(logits)) out.push_back(std::move(m));
  }
  return out;
}

#define CTXSEG_MODEL_INSTANTIATE(T)                                                                           \
  template struct PreparedSlide<T>;                                                                           \
  template PreparedSlide<T> prepare_slide(const TileGrid&, std::size_t);                                      \
  template Tensor<T> gather_pixels(const PreparedSlide<T>&, std::span<const std::size_t>);                    \
  template std::vector<std::uint8_t> gather_labels(const PreparedSlide<T>&, std::span<const std::size_t>);    \
  template ParamStore<T> init_model_params(const ModelConfig&, std::uint64_t);                                \
  template ad::Var<T> context_features(const ParamVars<T>&, ad::Tape<T>&, const PreparedSlide<T>&,            \
                                       const ModelConfig&);                                                   \
  template ad::Var<T> forward_with_context(const ParamVars<T>&, ad::Tape<T>&, const PreparedSlide<T>&,        \
                                           std::span<const std::size_t>, ad::Var<T>, const ModelConfig&);     \
  template ad::Var<T> forward_targets(const ParamVars<T>&, ad::Tape<T>&, const PreparedSlide<T>&,             \
                                      std::span<const std::size_t>, const ModelConfig&);                      \
  template std::vector<LabelImage> argmax_masks(const Tensor<T>&);                                            \
  template std::vector<LabelImage> predict_slide(const ParamStore<T>&, const PreparedSlide<T>&,               \
                                                 const ModelConfig&, std::size_t);

CTXSEG_MODEL_INSTANTIATE(float)
CTXSEG_MODEL_INSTANTIATE(double)

}  // namespace ctxseg
