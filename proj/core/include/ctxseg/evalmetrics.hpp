#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxseg/dataset.hpp"
#include "ctxseg/image.hpp"
#include "ctxseg/synthwsi.hpp"
#include "ctxseg/training.hpp"

namespace ctxseg {

// Places patch_masks[i] at the grid position of the i-th foreground tile
// (TileGrid::foreground_indices order); every other tile is `background`.
// Throws CompletenessError when the mask count differs from the foreground
// count, ShapeError for a mask that is not patch x patch.
LabelImage stitch_masks(const TileGrid& grid, const std::vector<LabelImage>& patch_masks,
                        std::uint8_t background = kBackground);

// All rows x cols tiles of a raster, row-major.
std::vector<LabelImage> split_mask(const LabelImage& mask, std::size_t patch);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = kDefaultClassCount);

  std::size_t classes() const { return classes_; }
  // Pixels with ground truth g predicted as p.
  std::uint64_t at(std::size_t g, std::size_t p) const { return counts_[g * classes_ + p]; }
  std::uint64_t total() const;

  // Throws ShapeError for unequal sizes, LabelError for a value >= classes.
  void add(const LabelImage& pred, const LabelImage& truth);
  void add(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(const LabelImage& pred, const LabelImage& truth, std::size_t classes);

struct ClassMetrics {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  bool excluded = false;  // TP + FP + FN == 0
};

// Zero denominators give 0; a class with TP + FP + FN == 0 is excluded.
std::vector<ClassMetrics> class_metrics(const ConfusionMatrix& cm);

struct MacroMetrics {
  double f1 = 0.0;
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

// Arithmetic mean over included classes; EvaluationError when none is included.
MacroMetrics macro_metrics(const std::vector<ClassMetrics>& classes);

struct MetricsReport {
  std::vector<std::string> class_names;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> classes;
  MacroMetrics macro;
};

MetricsReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names);

// `class,precision,recall,f1,iou,excluded`, one row per class plus `macro`.
std::string metrics_csv(const MetricsReport& report);
std::string metrics_json(const MetricsReport& report, int indent = 2);
void write_metrics(const MetricsReport& report, const std::filesystem::path& csv_path,
                   const std::filesystem::path& json_path);

// Fixed per-class display colours.
RgbImage colorize(const LabelImage& mask);
// Blend of an RGB slide with the colour map of `mask`; background pixels keep the slide colour.
RgbImage overlay(const RgbImage& image, const LabelImage& mask, double alpha = 0.5);

struct SlidePrediction {
  std::uint64_t slide_id = 0;
  LabelImage mask;
};

struct Evaluation {
  MetricsReport report;
  std::vector<SlidePrediction> predictions;
};

// Predicts every slide of `split`, stitches slide masks and pools one
// confusion matrix over the split. Throws ConfigError when the checkpoint and
// the dataset disagree on class count or tile size.
Evaluation evaluate(const Checkpoint& checkpoint, const Dataset& dataset, Split split);

}  // namespace ctxseg
