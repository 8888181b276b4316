#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/dataset.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/model_config.hpp"
#include "ctxseg/numerics.hpp"
#include "ctxseg/synthwsi.hpp"

namespace ctxseg {

// Mean pixel cross-entropy of logits [k, H, W] or [N, k, H, W] against class
// indices. Throws LabelError for a target >= k.
template <typename T>
double ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> targets);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of every parameter that has a gradient.
// Parameters absent from `grads` are left untouched. Throws ShapeError when a
// gradient does not match its parameter.
template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, double lr,
               const AdamConfig& adam = {});

struct TrainConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::size_t batch = 16;  // target tiles drawn from each sampled slide
  std::size_t slides_per_step = 1;  // gradients of this many slides are averaged per update
  double lr = 1e-3;
  std::size_t steps = 8000;
  Precision precision = Precision::Float32;
  std::size_t granularity = 1;  // pixel block-averaging factor, 1 = full resolution
  bool freeze_featurizer = false;
  // Weight of a tile-level cross-entropy on the context rows of every node
  // (linear head node_head.*, majority tile label as target). 0 trains on
  // the pixel loss alone, as does fusion none (no context rows).
  double node_loss_weight = 1.0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  ParamStore<float> params;
  std::uint64_t step = 0;
  double final_loss = 0.0;
};

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double elapsed_seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

using ProgressFn = std::function<void(const LogRow&)>;

// End-to-end training on the foreground tiles of `slides`. Each step draws
// `slides_per_step` slides and up to `batch` distinct target tiles from each;
// every slide gets one graph forward and the per-slide losses are averaged.
// The per-slide loss is the targets' pixel cross-entropy plus
// node_loss_weight times the node-level cross-entropy over all slide nodes.
// Deterministic in (config, slides). Throws ConfigError when no slide has
// foreground.
TrainResult train(const TrainConfig& config, const std::vector<TileGrid>& slides, const ProgressFn& progress = {});

// Majority pixel label of every node, ties to the lowest class.
template <typename T>
std::vector<std::uint8_t> node_labels(const PreparedSlide<T>& slide, std::size_t classes);

// Trains on the train split of `dataset`.
TrainResult train(const TrainConfig& config, const Dataset& dataset, const ProgressFn& progress = {});

std::vector<TileGrid> tile_split(const Dataset& dataset, Split split, std::size_t patch);

// CSV `step,loss,lr,elapsed_seconds`.
void write_train_log(const std::filesystem::path& path, const std::vector<LogRow>& log);

// Checkpoint file: "GCUN", uint32 version, uint64 header length, UTF-8 JSON
// header (config, step, final loss, tensor directory with name, shape and
// payload byte offset), then float32 little-endian payloads.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string to_json(const TrainConfig& config, int indent = -1);
TrainConfig train_config_from_json(const std::string& text);

}  // namespace ctxseg
