#include "ctxseg/fusion.hpp"

#include <cmath>
#include <vector>

#include "ctxseg/error.hpp"
#include "init.hpp"

namespace ctxseg {

using detail::param;

template <typename T>
void init_fusion_params(ParamStore<T>& store, const ModelConfig& config, std::uint64_t seed) {
  const std::size_t L = config.hidden;
  if (config.fusion == FusionStrategy::Cat) {
    detail::add_uniform(store, "fusion.cat.weight", {2 * L, L}, 2 * L, L, seed);
    detail::add_constant(store, "fusion.cat.bias", {L}, T{0});
  }
  if (config.fusion != FusionStrategy::DcFusion) return;
  if (config.heads == 0 || L % config.heads != 0) throw ConfigError("hidden must be divisible by heads");
  detail::add_constant(store, "fusion.pos.context", {1, L}, T{0});
  detail::add_constant(store, "fusion.pos.detail", {config.token_count(), L}, T{0});
  for (std::size_t i = 0; i < config.fusion_layers; ++i) {
    const std::string b = "fusion.block" + std::to_string(i);
    detail::add_constant(store, b + ".ln1.gamma", {L}, T{1});
    detail::add_constant(store, b + ".ln1.beta", {L}, T{0});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      detail::add_uniform(store, b + ".attn." + w, {L, L}, L, L, seed);
    }
    for (const char* w : {"bq", "bk", "bv", "bo"}) detail::add_constant(store, b + ".attn." + w, {L}, T{0});
    if (config.feed_forward) {
      detail::add_constant(store, b + ".ln2.gamma", {L}, T{1});
      detail::add_constant(store, b + ".ln2.beta", {L}, T{0});
      detail::add_uniform(store, b + ".ff.w1", {L, 2 * L}, L, 2 * L, seed);
      detail::add_constant(store, b + ".ff.b1", {2 * L}, T{0});
      detail::add_uniform(store, b + ".ff.w2", {2 * L, L}, 2 * L, L, seed);
      detail::add_constant(store, b + ".ff.b2", {L}, T{0});
    }
  }
}

template <typename T>
ad::Var<T> assemble_sequence(ad::Var<T> z_c, ad::Var<T> z_d, ad::Var<T> pos_context, ad::Var<T> pos_detail) {
  if (z_c.shape().size() != 2 || z_c.dim(0) != 1 || z_d.shape().size() != 2 || z_c.dim(1) != z_d.dim(1)) {
    throw ShapeError("assemble_sequence: context " + shape_string(z_c.shape()) + " and detail " +
                     shape_string(z_d.shape()) + " do not share a width");
  }
  if (pos_context.shape() != z_c.shape() || pos_detail.shape() != z_d.shape()) {
    throw ShapeError("assemble_sequence: positional embeddings do not match the token shapes");
  }
  return ad::concat({ad::add(z_c, pos_context), ad::add(z_d, pos_detail)}, 0);
}

namespace {

template <typename T>
ad::Var<T> linear(ad::Var<T> x, ad::Var<T> w, ad::Var<T> b) {
  return ad::add_row(ad::matmul(x, w), b);
}

}  // namespace

template <typename T>
ad::Var<T> msa_block(const ParamVars<T>& params, const std::string& prefix, ad::Var<T> z, std::size_t heads,
                     bool feed_forward) {
  if (z.shape().size() != 2 || z.dim(0) == 0) throw ShapeError("msa_block: expected a non-empty [S, L] sequence");
  const std::size_t L = z.dim(1);
  if (heads == 0 || L % heads != 0) {
    throw ConfigError("msa_block: width " + std::to_string(L) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const auto p = [&](const std::string& name) { return param(params, prefix + "." + name); };
  const T eps = static_cast<T>(kLayerNormEps);

  const auto h = ad::layer_norm_rows(z, p("ln1.gamma"), p("ln1.beta"), eps);
  const auto q = linear(h, p("attn.wq"), p("attn.bq"));
  const auto k = linear(h, p("attn.wk"), p("attn.bk"));
  const auto v = linear(h, p("attn.wv"), p("attn.bv"));
  const std::size_t d = L / heads;
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<ad::Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    const auto qi = ad::slice(q, 1, i * d, (i + 1) * d);
    const auto ki = ad::slice(k, 1, i * d, (i + 1) * d);
    const auto vi = ad::slice(v, 1, i * d, (i + 1) * d);
    const auto a = ad::softmax_rows(ad::scale(ad::matmul(qi, ad::transpose(ki)), inv_sqrt_d));
    outs.push_back(ad::matmul(a, vi));
  }
  const auto attn = heads == 1 ? outs[0] : ad::concat(std::span<const ad::Var<T>>(outs), 1);
  auto out = ad::add(z, linear(attn, p("attn.wo"), p("attn.bo")));
  if (feed_forward) {
    const auto g = ad::layer_norm_rows(out, p("ln2.gamma"), p("ln2.beta"), eps);
    out = ad::add(out, linear(ad::relu(linear(g, p("ff.w1"), p("ff.b1"))), p("ff.w2"), p("ff.b2")));
  }
  return out;
}

template <typename T>
ad::Var<T> dcfusion_forward(const ParamVars<T>& params, ad::Var<T> z0, const ModelConfig& config) {
  if (config.fusion_layers == 0) throw ConfigError("dcfusion_forward: needs at least one attention block");
  auto z = z0;
  for (std::size_t i = 0; i < config.fusion_layers; ++i) {
    z = msa_block(params, "fusion.block" + std::to_string(i), z, config.heads, config.feed_forward);
  }
  return z;
}

template <typename T>
ad::Var<T> select_detail_tokens(ad::Var<T> z, std::size_t token_count) {
  if (z.shape().size() != 2 || z.dim(0) != token_count + 1) {
    throw ShapeError("select_detail_tokens: expected " + std::to_string(token_count + 1) + " rows, got " +
                     shape_string(z.shape()));
  }
  return ad::slice(z, 0, 1, token_count + 1);
}

template <typename T>
ad::Var<T> fuse_variant(const ParamVars<T>& params, FusionStrategy strategy, ad::Var<T> z_c, ad::Var<T> z_d) {
  switch (strategy) {
    case FusionStrategy::None:
      return z_d;
    case FusionStrategy::Dot:
      if (z_c.value().size() != z_d.dim(1)) throw ShapeError("fuse_variant: context width mismatch");
      return ad::mul_row(z_d, z_c);
    case FusionStrategy::Cat: {
      if (z_c.value().size() != z_d.dim(1)) throw ShapeError("fuse_variant: context width mismatch");
      const std::vector<std::size_t> rows(z_d.dim(0), 0);
      const auto ctx = ad::gather_rows(ad::reshape(z_c, {1, z_d.dim(1)}), std::span<const std::size_t>(rows));
      return linear(ad::concat({z_d, ctx}, 1), param(params, "fusion.cat.weight"), param(params, "fusion.cat.bias"));
    }
    case FusionStrategy::DcFusion:
      break;
  }
  throw ConfigError("fuse_variant: strategy must be none, dot or cat");
}

template <typename T>
ad::Var<T> fuse(const ParamVars<T>& params, ad::Var<T> z_c, ad::Var<T> z_d, const ModelConfig& config) {
  if (config.fusion != FusionStrategy::DcFusion) return fuse_variant(params, config.fusion, z_c, z_d);
  const auto z0 = assemble_sequence(z_c, z_d, param(params, "fusion.pos.context"), param(params, "fusion.pos.detail"));
  return select_detail_tokens(dcfusion_forward(params, z0, config), z_d.dim(0));
}

#define CTXSEG_FUSION_INSTANTIATE(T)                                                                         \
  template void init_fusion_params(ParamStore<T>&, const ModelConfig&, std::uint64_t);                      \
  template ad::Var<T> assemble_sequence(ad::Var<T>, ad::Var<T>, ad::Var<T>, ad::Var<T>);                    \
  template ad::Var<T> msa_block(const ParamVars<T>&, const std::string&, ad::Var<T>, std::size_t, bool);    \
  template ad::Var<T> dcfusion_forward(const ParamVars<T>&, ad::Var<T>, const ModelConfig&);                \
  template ad::Var<T> select_detail_tokens(ad::Var<T>, std::size_t);                                        \
  template ad::Var<T> fuse_variant(const ParamVars<T>&, FusionStrategy, ad::Var<T>, ad::Var<T>);            \
  template ad::Var<T> fuse(const ParamVars<T>&, ad::Var<T>, ad::Var<T>, const ModelConfig&);

CTXSEG_FUSION_INSTANTIATE(float)
CTXSEG_FUSION_INSTANTIATE(double)

}  // namespace ctxseg
