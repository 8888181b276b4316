#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/model_config.hpp"
#include "ctxseg/numerics.hpp"

namespace ctxseg {

// Fusion of one context row z_c [1, L] with b^2 detail tokens z_d [b^2, L].
//
// Parameters (prefix "fusion."):
//   pos.context [1, L], pos.detail [b^2, L]          learned, zero-initialised
//   block<i>.ln1.{gamma,beta}, block<i>.attn.{wq,wk,wv,wo,bq,bk,bv,bo}
//   block<i>.ln2.*, block<i>.ff.{w1,b1,w2,b2}         only with feed_forward
//   cat.{weight,bias} [2L, L], [L]                    only for the cat strategy

template <typename T>
void init_fusion_params(ParamStore<T>& store, const ModelConfig& config, std::uint64_t seed);

// [z_c + pos.context; z_d + pos.detail] -> [b^2 + 1, L], context first.
template <typename T>
ad::Var<T> assemble_sequence(ad::Var<T> z_c, ad::Var<T> z_d, ad::Var<T> pos_context, ad::Var<T> pos_detail);

// z + MSA(LN(z)), then z + FF(LN(z)) when the block has a feed-forward part.
// `prefix` names the block, e.g. "fusion.block0".
template <typename T>
ad::Var<T> msa_block(const ParamVars<T>& params, const std::string& prefix, ad::Var<T> z, std::size_t heads,
                     bool feed_forward);

template <typename T>
ad::Var<T> dcfusion_forward(const ParamVars<T>& params, ad::Var<T> z0, const ModelConfig& config);

// Drops row 0.
template <typename T>
ad::Var<T> select_detail_tokens(ad::Var<T> z, std::size_t token_count);

// The ablation strategies none, dot and cat. Throws ConfigError for dcfusion.
template <typename T>
ad::Var<T> fuse_variant(const ParamVars<T>& params, FusionStrategy strategy, ad::Var<T> z_c, ad::Var<T> z_d);

// Any strategy: the fused detail tokens [b^2, L] of one patch.
template <typename T>
ad::Var<T> fuse(const ParamVars<T>& params, ad::Var<T> z_c, ad::Var<T> z_d, const ModelConfig& config);

}  // namespace ctxseg
