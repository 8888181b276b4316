#include "ctxseg/evalmetrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/model.hpp"

namespace ctxseg {

LabelImage stitch_masks(const TileGrid& grid, const std::vector<LabelImage>& patch_masks, std::uint8_t background) {
  const auto fg = grid.foreground_indices();
  if (patch_masks.size() != fg.size()) {
    throw CompletenessError("stitch_masks: " + std::to_string(patch_masks.size()) + " masks for " +
                            std::to_string(fg.size()) + " foreground tiles");
  }
  const std::size_t p = grid.patch;
  LabelImage out(grid.cols * p, grid.rows * p, background);
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const auto& m = patch_masks[i];
    if (m.width != p || m.height != p) throw ShapeError("stitch_masks: tile mask is not " + std::to_string(p) + "x" + std::to_string(p));
    const std::size_t r = fg[i] / grid.cols, c = fg[i] % grid.cols;
    for (std::size_t y = 0; y < p; ++y) {
      std::copy_n(m.values.begin() + y * p, p, out.values.begin() + (r * p + y) * out.width + c * p);
    }
  }
  return out;
}

std::vector<LabelImage> split_mask(const LabelImage& mask, std::size_t patch) {
  if (patch == 0 || mask.width % patch != 0 || mask.height % patch != 0) {
    throw ShapeError("split_mask: raster is not a whole number of tiles");
  }
  std::vector<LabelImage> out;
  for (std::size_t r = 0; r < mask.height / patch; ++r) {
    for (std::size_t c = 0; c < mask.width / patch; ++c) {
      LabelImage t(patch, patch);
      for (std::size_t y = 0; y < patch; ++y) {
        std::copy_n(mask.values.begin() + (r * patch + y) * mask.width + c * patch, patch, t.values.begin() + y * patch);
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::add(const LabelImage& pred, const LabelImage& truth) {
  if (pred.width != truth.width || pred.height != truth.height) {
    throw ShapeError("confusion_matrix: prediction " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                     " vs ground truth " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
  }
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const std::size_t p = pred.values[i], g = truth.values[i];
    if (p >= classes_ || g >= classes_) {
      throw LabelError("confusion_matrix: label " + std::to_string(std::max(p, g)) + " outside " +
                       std::to_string(classes_) + " classes");
    }
    ++counts_[g * classes_ + p];
  }
}

void ConfusionMatrix::add(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("confusion_matrix: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix confusion_matrix(const LabelImage& pred, const LabelImage& truth, std::size_t classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, truth);
  return cm;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::vector<ClassMetrics> class_metrics(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  const std::uint64_t total = cm.total();
  std::vector<ClassMetrics> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    auto& m = out[c];
    m.tp = cm.at(c, c);
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      m.fp += cm.at(o, c);
      m.fn += cm.at(c, o);
    }
    m.tn = total - m.tp - m.fp - m.fn;
    m.excluded = m.tp + m.fp + m.fn == 0;
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    m.iou = ratio(m.tp, m.tp + m.fp + m.fn);
  }
  return out;
}

MacroMetrics macro_metrics(const std::vector<ClassMetrics>& classes) {
  MacroMetrics out;
  std::size_t n = 0;
  for (const auto& m : classes) {
    if (m.excluded) continue;
    out.f1 += m.f1;
    out.iou += m.iou;
    out.precision += m.precision;
    out.recall += m.recall;
    ++n;
  }
  if (n == 0) throw EvaluationError("macro_metrics: every class is excluded");
  const double inv = 1.0 / static_cast<double>(n);
  out.f1 *= inv;
  out.iou *= inv;
  out.precision *= inv;
  out.recall *= inv;
  return out;
}

MetricsReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names) {
  if (class_names.size() != cm.classes()) throw ShapeError("make_report: class name count differs from class count");
  MetricsReport r{std::move(class_names), cm, class_metrics(cm), {}};
  r.macro = macro_metrics(r.classes);
  return r;
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "class,precision,recall,f1,iou,excluded\n";
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& m = report.classes[c];
    out << report.class_names[c] << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.iou << ','
        << (m.excluded ? 1 : 0) << '\n';
  }
  const auto& a = report.macro;
  out << "macro," << a.precision << ',' << a.recall << ',' << a.f1 << ',' << a.iou << ",0\n";
  return out.str();
}

std::string metrics_json(const MetricsReport& report, int indent) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& m = report.classes[c];
    classes.push_back({{"class", report.class_names[c]},
                       {"tp", m.tp},
                       {"fp", m.fp},
                       {"fn", m.fn},
                       {"tn", m.tn},
                       {"precision", m.precision},
                       {"recall", m.recall},
                       {"f1", m.f1},
                       {"iou", m.iou},
                       {"excluded", m.excluded}});
  }
  nlohmann::json confusion = nlohmann::json::array();
  for (std::size_t g = 0; g < report.confusion.classes(); ++g) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < report.confusion.classes(); ++p) row.push_back(report.confusion.at(g, p));
    confusion.push_back(row);
  }
  const nlohmann::json j{
      {"classes", classes},
      {"macro",
       {{"precision", report.macro.precision},
        {"recall", report.macro.recall},
        {"f1", report.macro.f1},
        {"iou", report.macro.iou}}},
      {"confusion", confusion},
      {"conventions",
       {{"pooling", "confusion counts summed over the split before per-class metrics"},
        {"zero_denominator", "metric set to 0"},
        {"excluded", "classes with TP+FP+FN = 0 are left out of macro means"}}}};
  return j.dump(indent);
}

void write_metrics(const MetricsReport& report, const std::filesystem::path& csv_path,
                   const std::filesystem::path& json_path) {
  std::ofstream csv(csv_path);
  csv << metrics_csv(report);
  std::ofstream js(json_path);
  js << metrics_json(report) << '\n';
  if (!csv || !js) throw FormatError("failed writing metrics to " + csv_path.string() + " / " + json_path.string());
}

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{
    {0, 0, 0},
    {46, 160, 67},
    {31, 119, 230},
    {230, 57, 70},
    {255, 190, 11},
    {131, 56, 236},
    {0, 200, 200},
    {250, 250, 250},
}};

}  // namespace

RgbImage colorize(const LabelImage& mask) {
  RgbImage out(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    const auto& c = kPalette[mask.values[i] % kPalette.size()];
    std::copy(c.begin(), c.end(), out.pixels.begin() + i * 3);
  }
  return out;
}

RgbImage overlay(const RgbImage& image, const LabelImage& mask, double alpha) {
  if (image.width != mask.width || image.height != mask.height) throw ShapeError("overlay: image and mask differ in size");
  RgbImage out = image;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    if (mask.values[i] == kBackground) continue;
    const auto& c = kPalette[mask.values[i] % kPalette.size()];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = (1.0 - alpha) * image.pixels[i * 3 + ch] + alpha * c[ch];
      out.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return out;
}

Evaluation evaluate(const Checkpoint& checkpoint, const Dataset& dataset, Split split) {
  const auto& cfg = checkpoint.config;
  if (dataset.manifest.params.classes != cfg.model.classes) {
    throw ConfigError("evaluate: classes differ (checkpoint " + std::to_string(cfg.model.classes) + ", dataset " +
                      std::to_string(dataset.manifest.params.classes) + ")");
  }
  if (dataset.manifest.params.patch != cfg.model.patch) {
    throw ConfigError("evaluate: patch differs (checkpoint " + std::to_string(cfg.model.patch) + ", dataset " +
                      std::to_string(dataset.manifest.params.patch) + ")");
  }
  ConfusionMatrix cm(cfg.model.classes);
  Evaluation out;
  for (const auto& grid : tile_split(dataset, split, cfg.model.patch)) {
    std::vector<LabelImage> masks;
    if (grid.foreground_count() > 0) {
      const auto prepared = prepare_slide<float>(grid, cfg.granularity);
      masks = predict_slide(checkpoint.params, prepared, cfg.model);
    }
    LabelImage mask = stitch_masks(grid, masks);
    cm.add(mask, dataset.slide(grid.slide_id).labels);
    out.predictions.push_back(SlidePrediction{grid.slide_id, std::move(mask)});
  }
  out.report = make_report(cm, dataset.manifest.class_names);
  return out;
}

}  // namespace ctxseg
