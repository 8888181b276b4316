#pragma once

#include <cstddef>
#include <cstdint>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/model_config.hpp"
#include "ctxseg/numerics.hpp"

namespace ctxseg {

// Patch encoder: three stride-2 conv stages with widths L/4, L/2, L (ReLU on
// the first two), turning a P x P patch into a b x b x L map, b = P / 8.
// Decoder: three nearest-neighbour x2 upsampling stages, each followed by a
// 3x3 conv; the first two concatenate the matching encoder activation.
//
// Token order is row-major over the b x b grid: token r * b + c holds the
// feature at map position (r, c).

template <typename T>
void init_codec_params(ParamStore<T>& store, const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct EncodedPatches {
  ad::Var<T> map;    // [N, L, b, b]
  ad::Var<T> skip1;  // [N, L/4, P/2, P/2]
  ad::Var<T> skip2;  // [N, L/2, P/4, P/4]
};

// pixels: [N, 3, P, P]. Throws ShapeError when P is not divisible by the token side.
template <typename T>
EncodedPatches<T> encode_patches(const ParamVars<T>& params, ad::Var<T> pixels, const ModelConfig& config);

// Detail tokens of patch n: [b^2, L].
template <typename T>
ad::Var<T> tokens_of(ad::Var<T> map, std::size_t n);

// Inverse of tokens_of for a single patch: [b^2, L] -> [1, L, b, b].
template <typename T>
ad::Var<T> tokens_to_map(ad::Var<T> tokens, std::size_t b);

// map: [N, L, b, b] (fused tokens), skips from the encoder -> logits [N, k, P, P].
template <typename T>
ad::Var<T> decode_tokens(const ParamVars<T>& params, ad::Var<T> map, ad::Var<T> skip1, ad::Var<T> skip2,
                         const ModelConfig& config);

}  // namespace ctxseg
