#include <benchmark/benchmark.h>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/gcn.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/rng.hpp"
#include "ctxseg/synthwsi.hpp"
#include "ctxseg/training.hpp"

using namespace ctxseg;

namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

const TileGrid& default_grid() {
  static const TileGrid grid = tile_slide(generate_slide(SlideParams{}, 3, 0), 32);
  return grid;
}

const PreparedSlide<float>& default_slide() {
  static const PreparedSlide<float> slide = prepare_slide<float>(default_grid());
  return slide;
}

}  // namespace

// One 3x3 convolution over a batch of 16 patches, forward and backward.
static void BM_Conv2dStep(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({16, c, 32, 32}, 1);
  const auto w = random_tensor({c, c, 3, 3}, 2);
  const auto b = random_tensor({c}, 3);
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto wv = tape.parameter(w);
    auto y = ad::conv2d(tape.constant(x), wv, tape.parameter(b), 1, 1);
    tape.backward(ad::mean(y));
    benchmark::DoNotOptimize(tape.grad(wv));
  }
}
BENCHMARK(BM_Conv2dStep)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_GcnForward(benchmark::State& state) {
  const auto& slide = default_slide();
  GcnConfig cfg;
  cfg.layers = static_cast<std::size_t>(state.range(0));
  ParamStore<float> params;
  init_gcn_params(params, cfg, 5);
  const auto x0 = random_tensor({slide.node_count(), cfg.hidden}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(gcn_forward(x0, slide.graph, params, cfg));
  state.counters["nodes"] = static_cast<double>(slide.node_count());
}
BENCHMARK(BM_GcnForward)->Arg(1)->Arg(3)->Unit(benchmark::kMicrosecond);

static void BM_PredictSlide(benchmark::State& state) {
  ModelConfig cfg;
  cfg.fusion = static_cast<FusionStrategy>(state.range(0));
  const auto params = init_model_params<float>(cfg, 7);
  for (auto _ : state) benchmark::DoNotOptimize(predict_slide(params, default_slide(), cfg));
}
BENCHMARK(BM_PredictSlide)
    ->Arg(static_cast<int>(FusionStrategy::None))
    ->Arg(static_cast<int>(FusionStrategy::DcFusion))
    ->Unit(benchmark::kMillisecond);

// Default training step: 16 targets from one slide, forward, backward, Adam.
static void BM_TrainSteps(benchmark::State& state) {
  TrainConfig cfg;
  cfg.steps = 10;
  const std::vector<TileGrid> slides{default_grid()};
  for (auto _ : state) benchmark::DoNotOptimize(train(cfg, slides));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * cfg.steps));
}
BENCHMARK(BM_TrainSteps)->Unit(benchmark::kMillisecond);

static void BM_GenerateSlide(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_slide(SlideParams{}, ++seed, 0));
}
BENCHMARK(BM_GenerateSlide)->Unit(benchmark::kMillisecond);

static void BM_Otsu(benchmark::State& state) {
  Rng rng(11);
  std::vector<std::uint64_t> hist(256);
  for (auto& h : hist) h = rng.below(1000);
  for (auto _ : state) benchmark::DoNotOptimize(otsu_threshold(hist));
}
BENCHMARK(BM_Otsu);

BENCHMARK_MAIN();
