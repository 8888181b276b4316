#include "ctxseg/codec.hpp"

#include <string>

#include "ctxseg/error.hpp"
#include "init.hpp"

namespace ctxseg {

using detail::param;

namespace {

template <typename T>
void add_conv(ParamStore<T>& store, const std::string& base, std::size_t in, std::size_t out, std::size_t k,
              std::uint64_t seed) {
  detail::add_uniform(store, base + ".weight", {out, in, k, k}, in * k * k, out * k * k, seed);
  detail::add_constant(store, base + ".bias", {out}, T{0});
}

template <typename T>
ad::Var<T> conv(const ParamVars<T>& params, const std::string& base, ad::Var<T> x, std::size_t stride,
                std::size_t pad) {
  return ad::conv2d(x, param(params, base + ".weight"), param(params, base + ".bias"), stride, pad);
}

}  // namespace

template <typename T>
void init_codec_params(ParamStore<T>& store, const ModelConfig& config, std::uint64_t seed) {
  const std::size_t L = config.hidden, k = config.stem_kernel;
  add_conv(store, "enc.conv1", 3, L / 4, k, seed);
  add_conv(store, "enc.conv2", L / 4, L / 2, k, seed);
  add_conv(store, "enc.conv3", L / 2, L, k, seed);
  add_conv(store, "dec.conv1", L + L / 2, L / 2, 3, seed);
  add_conv(store, "dec.conv2", L / 2 + L / 4, L / 4, 3, seed);
  add_conv(store, "dec.conv3", L / 4, config.classes, 3, seed);
}

template <typename T>
EncodedPatches<T> encode_patches(const ParamVars<T>& params, ad::Var<T> pixels, const ModelConfig& config) {
  const Shape s = pixels.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3]) {
    throw ShapeError("encode_patches: expected [N, 3, P, P], got " + shape_string(s));
  }
  if (s[2] % config.token_side != 0) {
    throw ShapeError("encode_patches: patch side " + std::to_string(s[2]) + " is not divisible by token side " +
                     std::to_string(config.token_side));
  }
  const std::size_t pad = config.stem_kernel == 3 ? 1 : 0;
  EncodedPatches<T> out;
  out.skip1 = ad::relu(conv(params, "enc.conv1", pixels, 2, pad));
  out.skip2 = ad::relu(conv(params, "enc.conv2", out.skip1, 2, pad));
  out.map = conv(params, "enc.conv3", out.skip2, 2, pad);
  return out;
}

template <typename T>
ad::Var<T> tokens_of(ad::Var<T> map, std::size_t n) {
  const Shape s = map.shape();
  if (s.size() != 4 || n >= s[0]) throw ShapeError("tokens_of: bad map " + shape_string(s));
  const auto one = ad::slice(map, 0, n, n + 1);
  return ad::transpose(ad::reshape(one, {s[1], s[2] * s[3]}));
}

template <typename T>
ad::Var<T> tokens_to_map(ad::Var<T> tokens, std::size_t b) {
  const Shape s = tokens.shape();
  if (s.size() != 2 || s[0] != b * b) {
    throw ShapeError("tokens_to_map: expected " + std::to_string(b * b) + " tokens, got " + shape_string(s));
  }
  return ad::reshape(ad::transpose(tokens), {1, s[1], b, b});
}

template <typename T>
ad::Var<T> decode_tokens(const ParamVars<T>& params, ad::Var<T> map, ad::Var<T> skip1, ad::Var<T> skip2,
                         const ModelConfig& config) {
  const Shape m = map.shape();
  if (m.size() != 4 || m[1] != config.hidden || skip2.shape().size() != 4 || skip2.dim(2) != 2 * m[2] ||
      skip1.dim(2) != 4 * m[2] || skip1.dim(0) != m[0] || skip2.dim(0) != m[0]) {
    throw ShapeError("decode_tokens: map " + shape_string(m) + " does not match skips " +
                     shape_string(skip1.shape()) + ", " + shape_string(skip2.shape()));
  }
  auto h = ad::concat({ad::upsample_nearest(map, 2), skip2}, 1);
  h = ad::relu(conv(params, "dec.conv1", h, 1, 1));
  h = ad::concat({ad::upsample_nearest(h, 2), skip1}, 1);
  h = ad::relu(conv(params, "dec.conv2", h, 1, 1));
  return conv(params, "dec.conv3", ad::upsample_nearest(h, 2), 1, 1);
}

#define CTXSEG_CODEC_INSTANTIATE(T)                                                                       \
  template void init_codec_params(ParamStore<T>&, const ModelConfig&, std::uint64_t);                    \
  template EncodedPatches<T> encode_patches(const ParamVars<T>&, ad::Var<T>, const ModelConfig&);        \
  template ad::Var<T> tokens_of(ad::Var<T>, std::size_t);                                                \
  template ad::Var<T> tokens_to_map(ad::Var<T>, std::size_t);                                            \
  template ad::Var<T> decode_tokens(const ParamVars<T>&, ad::Var<T>, ad::Var<T>, ad::Var<T>, const ModelConfig&);

CTXSEG_CODEC_INSTANTIATE(float)
CTXSEG_CODEC_INSTANTIATE(double)

}  // namespace ctxseg
