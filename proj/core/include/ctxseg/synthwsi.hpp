#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/image.hpp"

namespace ctxseg {

// Class indices of the four-class task. Background is always 0.
enum ClassId : std::uint8_t {
  kBackground = 0,
  kEarly = 1,      // plain disk
  kPrimary = 2,    // dotted disk
  kSecondary = 3,  // dotted disk with one germinal-centre tile
};

inline constexpr std::size_t kDefaultClassCount = 4;
const std::vector<std::string>& default_class_names();

// Generator parameters. Radii are in tiles, intensities in 8-bit levels.
struct SlideParams {
  std::size_t grid = 16;   // slide is grid x grid tiles
  std::size_t patch = 32;  // tile side in pixels
  std::size_t min_structures = 2;
  std::size_t max_structures = 6;
  double min_radius = 1.0;
  double max_radius = 3.0;
  double radius_step = 0.5;         // radii lie on min_radius + k * step; 0 draws them continuously
  double gc_probability = 0.25;     // P(structure is SEL, i.e. carries a GC marker)
  double early_probability = 0.45;  // P(plain E | not SEL); the rest are PET
  double noise = 10.0;              // half-width of uniform per-channel noise
  std::size_t classes = kDefaultClassCount;

  bool operator==(const SlideParams&) const = default;
};

// Canonical text form, stable across runs; used for digests and manifests.
std::string canonical_string(const SlideParams& params);
std::string params_digest(const SlideParams& params);

struct GridCoord {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const GridCoord&) const = default;
};

struct PlantedStructure {
  ClassId kind = kEarly;
  GridCoord center;              // tile holding the disk centre
  double radius_tiles = 1.0;
  std::optional<GridCoord> gc_tile;  // set for SEL structures only
};

struct SyntheticSlide {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  SlideParams params;
  RgbImage image;
  LabelImage labels;
  std::vector<PlantedStructure> structures;  // empty for slides loaded from disk
};

// Smallest t maximising the between-class variance of {v <= t} vs {v > t};
// nullopt when that variance is zero for every t. Throws DomainError for an
// empty or all-zero histogram.
std::optional<std::uint8_t> otsu_threshold(std::span<const std::uint64_t> histogram);

std::array<std::uint64_t, 256> gray_histogram(const GrayImage& gray);

// Deterministic in (params, seed). Throws GenerationError when structures
// cannot be placed without touching after a bounded number of attempts.
SyntheticSlide generate_slide(const SlideParams& params, std::uint64_t seed, std::uint64_t id = 0);

struct Tile {
  GridCoord coord;
  bool foreground = false;
  RgbImage pixels;    // patch x patch
  LabelImage labels;  // patch x patch class indices
  std::uint8_t majority_label() const;
};

// Non-overlapping patch lattice of a slide, tiles in row-major order.
struct TileGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch = 0;
  std::uint64_t slide_id = 0;
  std::optional<std::uint8_t> threshold;
  std::vector<Tile> tiles;

  const Tile& tile(std::size_t row, std::size_t col) const { return tiles[row * cols + col]; }
  // Row-major indices of foreground tiles; node i of the context graph is
  // tiles[foreground_indices()[i]].
  std::vector<std::size_t> foreground_indices() const;
  std::size_t foreground_count() const;
};

inline constexpr double kDefaultForegroundFraction = 0.5;

// A tile is foreground iff the fraction of its pixels with gray <= Otsu
// threshold is at least `foreground_fraction`. A slide with no threshold
// (uniform gray) has no foreground.
TileGrid tile_slide(const RgbImage& image, const LabelImage& labels, std::size_t patch,
                    double foreground_fraction = kDefaultForegroundFraction, std::uint64_t slide_id = 0);
TileGrid tile_slide(const SyntheticSlide& slide, std::size_t patch,
                    double foreground_fraction = kDefaultForegroundFraction);

}  // namespace ctxseg
