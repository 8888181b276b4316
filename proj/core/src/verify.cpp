#include "ctxseg/verify.hpp"

#include "ctxseg/codec.hpp"
#include "ctxseg/fusion.hpp"
#include "ctxseg/gcn.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/rng.hpp"
#include "init.hpp"

namespace ctxseg {

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// sum(out * weights) for a fixed random weighting.
ad::Var<double> weighted_sum(ad::Tape<double>& tape, ad::Var<double> out, const Tensor<double>& weights) {
  return ad::sum(ad::mul(out, tape.constant(weights)));
}

std::vector<std::uint8_t> random_labels(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::uint8_t> out(n);
  for (auto& v : out) v = static_cast<std::uint8_t>(rng.below(k));
  return out;
}

// Biases start at zero; jitter them so the check does not sit on a symmetric point.
void jitter(ParamStore<double>& params, Rng& rng, double scale = 0.1) {
  for (auto& [name, t] : params) {
    for (auto& v : t.values()) v += rng.uniform(-scale, scale);
  }
}

// 2 x 3 grid with one missing corner: 5 nodes, a path with a branch.
ContextGraph small_graph() {
  return ContextGraph(std::vector<GridCoord>{{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}});
}

}  // namespace

std::vector<GradCase> gradcheck_suite(std::uint64_t seed, double h) {
  std::vector<GradCase> out;
  Rng rng(derive_seed(seed, 0x67726164));

  {  // featurizer: 2 tiles of 8 x 8, L = 4
    ParamStore<double> params;
    init_featurizer_params(params, 4, seed);
    jitter(params, rng);
    const auto pixels = random_tensor(rng, {2, 3, 8, 8});
    const auto w = random_tensor(rng, {2, 4});
    out.push_back({"featurizer", grad_check(
                                     [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
                                       return weighted_sum(tape, featurize_nodes(p, tape.constant(pixels), 4), w);
                                     },
                                     params, h)});
  }

  for (const auto aggregation : {Aggregation::Symmetric, Aggregation::SoftmaxTemperature}) {
    const GcnConfig cfg{2, 4, aggregation};
    ParamStore<double> params;
    init_gcn_params(params, cfg, seed);
    jitter(params, rng);
    const auto graph = small_graph();
    params["x0"] = random_tensor(rng, {graph.node_count(), 4});
    const auto w = random_tensor(rng, {graph.node_count(), 4});
    out.push_back({"gcn." + to_string(aggregation),
                   grad_check(
                       [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
                         return weighted_sum(tape, gcn_forward(p, p.at("x0"), graph, cfg), w);
                       },
                       params, h)});
  }

  for (const bool ff : {false, true}) {  // one block, S = 5, L = 8, 2 heads
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.fusion_layers = 1;
    cfg.feed_forward = ff;
    cfg.patch = 16;  // 4 detail tokens + context = 5 rows
    ParamStore<double> params;
    init_fusion_params(params, cfg, seed);
    jitter(params, rng);
    params["z"] = random_tensor(rng, {5, 8});
    const auto w = random_tensor(rng, {5, 8});
    out.push_back({ff ? "msa_block.ff" : "msa_block",
                   grad_check(
                       [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
                         return weighted_sum(tape, msa_block(p, "fusion.block0", p.at("z"), 2, ff), w);
                       },
                       params, h)});
  }

  {  // cross-entropy on raw logits
    ParamStore<double> params;
    params["logits"] = random_tensor(rng, {2, 4, 3, 3}, -2.0, 2.0);
    const auto labels = random_labels(rng, 2 * 9, 4);
    out.push_back({"cross_entropy", grad_check(
                                        [&](ad::Tape<double>&, const ParamVars<double>& p) {
                                          return ad::cross_entropy(p.at("logits"), std::span(labels));
                                        },
                                        params, h)});
  }

  for (const std::size_t stem : {std::size_t{3}, std::size_t{2}}) {  // codec on an 8 x 8 patch, L = 4
    ModelConfig cfg;
    cfg.hidden = 4;
    cfg.patch = 8;
    cfg.classes = 3;
    cfg.stem_kernel = stem;
    ParamStore<double> params;
    init_codec_params(params, cfg, seed);
    jitter(params, rng);
    const auto pixels = random_tensor(rng, {1, 3, 8, 8});
    const auto labels = random_labels(rng, 64, 3);
    out.push_back({"codec.stem" + std::to_string(stem),
                   grad_check(
                       [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
                         const auto enc = encode_patches(p, tape.constant(pixels), cfg);
                         const auto logits = decode_tokens(p, enc.map, enc.skip1, enc.skip2, cfg);
                         return ad::cross_entropy(logits, std::span(labels));
                       },
                       params, h)});
  }

  for (const auto fusion : {FusionStrategy::DcFusion, FusionStrategy::Cat, FusionStrategy::Dot}) {
    // Whole network on a 5-node slide of 16 x 16 tiles, two targets.
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.patch = 16;
    cfg.classes = 3;
    cfg.gcn_layers = 2;
    cfg.fusion_layers = 1;
    cfg.fusion = fusion;
    auto params = init_model_params<double>(cfg, seed);
    jitter(params, rng);
    PreparedSlide<double> slide;
    slide.patch = 16;
    slide.graph = small_graph();
    slide.tile_index = {0, 1, 2, 4, 5};
    slide.pixels = random_tensor(rng, {5, 3, 16, 16});
    slide.labels = random_labels(rng, 5 * 256, 3);
    const std::vector<std::size_t> targets{1, 3};
    const auto labels = gather_labels(slide, std::span<const std::size_t>(targets));
    out.push_back({"pipeline." + to_string(fusion),
                   grad_check(
                       [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
                         const auto logits = forward_targets(p, tape, slide, std::span(targets), cfg);
                         return ad::cross_entropy(logits, std::span(labels));
                       },
                       params, h, 24)});
  }
  return out;
}

}  // namespace ctxseg
