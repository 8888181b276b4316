#include "ctxseg/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/error.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/rng.hpp"
#include "init.hpp"

namespace ctxseg {

template <typename T>
double ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> targets) {
  ad::Tape<T> tape;
  Tensor<T> batched = logits.rank() == 3 ? logits.reshaped({1, logits.dim(0), logits.dim(1), logits.dim(2)}) : logits;
  return static_cast<double>(ad::cross_entropy(tape.constant(std::move(batched)), targets).value()[0]);
}

template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, double lr,
               const AdamConfig& adam) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("adam_step: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError("adam_step: gradient of '" + name + "' has shape " + shape_string(g.shape()) +
                       ", parameter has " + shape_string(it->second.shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto [mi, m_new] = state.m.try_emplace(name, g.shape());
    auto [vi, v_new] = state.v.try_emplace(name, g.shape());
    T* pm = mi->second.data();
    T* pv = vi->second.data();
    T* pp = p.data();
    const T* pg = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = pg[i];
      const double m = adam.beta1 * pm[i] + (1.0 - adam.beta1) * gi;
      const double v = adam.beta2 * pv[i] + (1.0 - adam.beta2) * gi * gi;
      pm[i] = static_cast<T>(m);
      pv[i] = static_cast<T>(v);
      pp[i] = static_cast<T>(pp[i] - lr * (m / c1) / (std::sqrt(v / c2) + adam.eps));
    }
  }
}

void TrainConfig::validate() const {
  model.validate();
  if (batch == 0) throw ConfigError("batch must be positive");
  if (slides_per_step == 0) throw ConfigError("slides_per_step must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(node_loss_weight >= 0.0) || !std::isfinite(node_loss_weight)) {
    throw ConfigError("node_loss_weight must be non-negative");
  }
  if (granularity == 0 || model.patch % granularity != 0) {
    throw ConfigError("granularity must divide the patch side");
  }
}

template <typename T>
std::vector<std::uint8_t> node_labels(const PreparedSlide<T>& slide, std::size_t classes) {
  const std::size_t plane = slide.patch * slide.patch;
  std::vector<std::uint8_t> out(slide.node_count());
  std::vector<std::size_t> counts(classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t p = 0; p < plane; ++p) {
      const auto v = slide.labels[i * plane + p];
      if (v >= classes) throw LabelError("node_labels: label " + std::to_string(v) + " >= class count");
      ++counts[v];
    }
    out[i] = static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  return out;
}

namespace {

template <typename T>
TrainResult train_impl(const TrainConfig& config, const std::vector<TileGrid>& grids, const ProgressFn& progress) {
  std::vector<PreparedSlide<T>> slides;
  std::vector<std::vector<std::uint8_t>> majority;
  for (const auto& g : grids) {
    if (g.patch != config.model.patch) {
      throw ConfigError("train: slide patch " + std::to_string(g.patch) + " differs from model patch " +
                        std::to_string(config.model.patch));
    }
    if (g.foreground_count() > 0) {
      slides.push_back(prepare_slide<T>(g, config.granularity));
      majority.push_back(node_labels(slides.back(), config.model.classes));
    }
  }
  if (slides.empty()) throw ConfigError("train: no training slide has foreground tiles");

  ParamStore<T> params = init_model_params<T>(config.model, derive_seed(config.seed, 10));
  const bool node_loss = config.node_loss_weight > 0.0 && config.model.uses_context();
  if (node_loss) {
    const std::size_t L = config.model.hidden, k = config.model.classes;
    detail::add_uniform(params, "node_head.weight", {L, k}, L, k, derive_seed(config.seed, 12));
    detail::add_constant(params, "node_head.bias", {k}, T{0});
  }
  AdamState<T> adam;
  Rng rng(derive_seed(config.seed, 11));
  const auto trainable = [&](const std::string& name) {
    return !(config.freeze_featurizer && is_featurizer_param(name));
  };

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  double loss_value = 0.0;
  const T inv_slides = T{1} / static_cast<T>(config.slides_per_step);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    ParamStore<T> grads;
    loss_value = 0.0;
    for (std::size_t k = 0; k < config.slides_per_step; ++k) {
      const std::size_t pick = rng.below(slides.size());
      const auto& slide = slides[pick];
      // Partial Fisher-Yates draw of distinct targets.
      std::vector<std::size_t> pool(slide.node_count());
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      const std::size_t take = std::min(config.batch, pool.size());
      for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      const std::span<const std::size_t> targets(pool.data(), take);

      ad::Tape<T> tape;
      const auto vars = bind_params(tape, params, trainable);
      const auto labels = gather_labels(slide, targets);
      ad::Var<T> objective;
      if (node_loss) {
        const auto context = context_features(vars, tape, slide, config.model);
        const auto logits =
            forward_with_context(vars, tape, slide, targets, ad::gather_rows(context, targets), config.model);
        const auto node_logits = ad::reshape(
            ad::add_row(ad::matmul(context, vars.at("node_head.weight")), vars.at("node_head.bias")),
            {slide.node_count(), config.model.classes, 1, 1});
        const auto node_ce = ad::cross_entropy(node_logits, std::span<const std::uint8_t>(majority[pick]));
        objective = ad::add(ad::cross_entropy(logits, std::span<const std::uint8_t>(labels)),
                            ad::scale(node_ce, static_cast<T>(config.node_loss_weight)));
      } else {
        const auto logits = forward_targets(vars, tape, slide, targets, config.model);
        objective = ad::cross_entropy(logits, std::span<const std::uint8_t>(labels));
      }
      const auto loss = ad::scale(objective, inv_slides);
      loss_value += static_cast<double>(loss.value()[0]);
      tape.backward(loss);
      for (const auto& [name, var] : vars) {
        if (!tape.requires_grad(var.id())) continue;
        auto g = tape.grad(var);
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, std::move(g));
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
      }
    }
    if (!std::isfinite(loss_value)) throw EvaluationError("train: non-finite loss at step " + std::to_string(step));
    adam_step(params, grads, adam, config.lr);

    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    result.log.push_back(LogRow{step, loss_value, config.lr, elapsed.count()});
    if (progress) progress(result.log.back());
  }

  result.checkpoint.config = config;
  result.checkpoint.params = cast_params<float>(params);
  result.checkpoint.step = config.steps;
  result.checkpoint.final_loss = loss_value;
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<TileGrid>& slides, const ProgressFn& progress) {
  config.validate();
  return config.precision == Precision::Float64 ? train_impl<double>(config, slides, progress)
                                                : train_impl<float>(config, slides, progress);
}

std::vector<TileGrid> tile_split(const Dataset& dataset, Split split, std::size_t patch) {
  std::vector<TileGrid> out;
  for (const auto id : dataset.manifest.ids(split)) {
    const auto& s = dataset.slide(id);
    out.push_back(tile_slide(s.image, s.labels, patch, dataset.manifest.foreground_fraction, s.id));
  }
  return out;
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress) {
  if (dataset.manifest.train.empty()) throw ConfigError("train: dataset has an empty train split");
  if (dataset.manifest.params.classes != config.model.classes) {
    throw ConfigError("train: dataset has " + std::to_string(dataset.manifest.params.classes) +
                      " classes, model expects " + std::to_string(config.model.classes));
  }
  return train(config, tile_split(dataset, Split::Train, config.model.patch), progress);
}

void write_train_log(const std::filesystem::path& path, const std::vector<LogRow>& log) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write training log " + path.string());
  out << "step,loss,lr,elapsed_seconds\n";
  out.precision(9);
  for (const auto& r : log) out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.elapsed_seconds << '\n';
  if (!out) throw FormatError("failed writing training log " + path.string());
}

template std::vector<std::uint8_t> node_labels(const PreparedSlide<float>&, std::size_t);
template std::vector<std::uint8_t> node_labels(const PreparedSlide<double>&, std::size_t);
template double ce_loss(const Tensor<float>&, std::span<const std::uint8_t>);
template double ce_loss(const Tensor<double>&, std::span<const std::uint8_t>);
template void adam_step(ParamStore<float>&, const ParamStore<float>&, AdamState<float>&, double, const AdamConfig&);
template void adam_step(ParamStore<double>&, const ParamStore<double>&, AdamState<double>&, double,
                        const AdamConfig&);

}  // namespace ctxseg
