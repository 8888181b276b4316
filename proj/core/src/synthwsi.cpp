#include "ctxseg/synthwsi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ctxseg/error.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {

const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {"BG", "E", "PET", "SEL"};
  return names;
}

std::string canonical_string(const SlideParams& p) {
  std::ostringstream os;
  os.precision(17);
  os << "grid=" << p.grid << ";patch=" << p.patch << ";min_structures=" << p.min_structures
     << ";max_structures=" << p.max_structures << ";min_radius=" << p.min_radius << ";max_radius=" << p.max_radius
     << ";radius_step=" << p.radius_step
     << ";gc_probability=" << p.gc_probability << ";early_probability=" << p.early_probability
     << ";noise=" << p.noise << ";classes=" << p.classes;
  return os.str();
}

std::string params_digest(const SlideParams& params) {
  // FNV-1a 64
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : canonical_string(params)) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::array<std::uint64_t, 256> gray_histogram(const GrayImage& gray) {
  std::array<std::uint64_t, 256> hist{};
  for (auto v : gray.values) ++hist[v];
  return hist;
}

std::optional<std::uint8_t> otsu_threshold(std::span<const std::uint64_t> histogram) {
  if (histogram.empty() || histogram.size() > 256) {
    throw DomainError("otsu_threshold: histogram must have between 1 and 256 bins");
  }
  double total = 0.0, total_sum = 0.0;
  for (std::size_t v = 0; v < histogram.size(); ++v) {
    total += static_cast<double>(histogram[v]);
    total_sum += static_cast<double>(v) * static_cast<double>(histogram[v]);
  }
  if (total <= 0.0) throw DomainError("otsu_threshold: histogram has no samples");

  double best = 0.0;
  std::optional<std::uint8_t> best_t;
  double n0 = 0.0, s0 = 0.0;
  for (std::size_t t = 0; t < histogram.size(); ++t) {
    n0 += static_cast<double>(histogram[t]);
    s0 += static_cast<double>(t) * static_cast<double>(histogram[t]);
    const double n1 = total - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double diff = s0 / n0 - (total_sum - s0) / n1;
    const double between = (n0 / total) * (n1 / total) * diff * diff;
    if (between > best) {
      best = between;
      best_t = static_cast<std::uint8_t>(t);
    }
  }
  return best_t;
}

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kBackgroundColor{234, 228, 236};
constexpr Rgb kTissueColor{96, 58, 128};
constexpr Rgb kDotColor{38, 18, 66};
constexpr Rgb kGerminalColor{182, 160, 196};
constexpr double kDotSpacing = 8.0;   // pixels between jittered dot lattice cells
constexpr double kDotRadius = 1.75;   // pixels
constexpr double kGerminalRadius = 0.3;  // fraction of patch side
constexpr int kPlacementAttempts = 500;
constexpr int kLayoutRestarts = 50;

struct Canvas {
  std::size_t side;
  std::vector<Rgb> color;
  LabelImage labels;

  explicit Canvas(std::size_t s) : side(s), color(s * s, kBackgroundColor), labels(s, s, kBackground) {}
};

bool inside_disk(double x, double y, double cx, double cy, double r) {
  const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
  return dx * dx + dy * dy < r * r;
}

// Tiles containing at least one disk pixel.
std::vector<GridCoord> footprint(std::size_t patch, double cx, double cy, double radius_px) {
  std::vector<GridCoord> tiles;
  const auto lo_x = static_cast<std::size_t>(std::max(0.0, std::floor(cx - radius_px)));
  const auto lo_y = static_cast<std::size_t>(std::max(0.0, std::floor(cy - radius_px)));
  const auto hi_x = static_cast<std::size_t>(std::ceil(cx + radius_px));
  const auto hi_y = static_cast<std::size_t>(std::ceil(cy + radius_px));
  for (std::size_t ty = lo_y / patch; ty * patch < hi_y; ++ty)
    for (std::size_t tx = lo_x / patch; tx * patch < hi_x; ++tx) {
      bool hit = false;
      for (std::size_t y = ty * patch; y < (ty + 1) * patch && !hit; ++y)
        for (std::size_t x = tx * patch; x < (tx + 1) * patch && !hit; ++x) hit = inside_disk(x, y, cx, cy, radius_px);
      if (hit) tiles.push_back({ty, tx});
    }
  return tiles;
}

void paint_structure(Canvas& canvas, const PlantedStructure& s, std::size_t patch, Rng& rng) {
  const double cx = (static_cast<double>(s.center.col) + 0.5) * static_cast<double>(patch);
  const double cy = (static_cast<double>(s.center.row) + 0.5) * static_cast<double>(patch);
  const double r = s.radius_tiles * static_cast<double>(patch);
  const auto x0 = static_cast<std::size_t>(std::floor(cx - r)), x1 = static_cast<std::size_t>(std::ceil(cx + r));
  const auto y0 = static_cast<std::size_t>(std::floor(cy - r)), y1 = static_cast<std::size_t>(std::ceil(cy + r));
  for (std::size_t y = y0; y < std::min(y1, canvas.side); ++y)
    for (std::size_t x = x0; x < std::min(x1, canvas.side); ++x)
      if (inside_disk(x, y, cx, cy, r)) {
        canvas.color[y * canvas.side + x] = kTissueColor;
        canvas.labels.at(x, y) = s.kind;
      }

  if (s.kind == kPrimary || s.kind == kSecondary) {
    // One dot per lattice cell at a uniformly jittered position.
    for (double gy = y0; gy < y1; gy += kDotSpacing)
      for (double gx = x0; gx < x1; gx += kDotSpacing) {
        const double dx = gx + rng.uniform(0.0, kDotSpacing);
        const double dy = gy + rng.uniform(0.0, kDotSpacing);
        const auto bx0 = static_cast<std::size_t>(std::max(0.0, std::floor(dx - kDotRadius)));
        const auto by0 = static_cast<std::size_t>(std::max(0.0, std::floor(dy - kDotRadius)));
        for (std::size_t y = by0; y < std::min<std::size_t>(canvas.side, dy + kDotRadius + 1); ++y)
          for (std::size_t x = bx0; x < std::min<std::size_t>(canvas.side, dx + kDotRadius + 1); ++x)
            if (inside_disk(x, y, dx, dy, kDotRadius) && inside_disk(x, y, cx, cy, r)) {
              canvas.color[y * canvas.side + x] = kDotColor;
            }
      }
  }

  if (s.gc_tile) {
    const double jitter = 0.1 * static_cast<double>(patch);
    const double gx = (static_cast<double>(s.gc_tile->col) + 0.5) * static_cast<double>(patch) +
                      rng.uniform(-jitter, jitter);
    const double gy = (static_cast<double>(s.gc_tile->row) + 0.5) * static_cast<double>(patch) +
                      rng.uniform(-jitter, jitter);
    const double gr = kGerminalRadius * static_cast<double>(patch);
    for (std::size_t y = static_cast<std::size_t>(gy - gr); y <= static_cast<std::size_t>(gy + gr); ++y)
      for (std::size_t x = static_cast<std::size_t>(gx - gr); x <= static_cast<std::size_t>(gx + gr); ++x)
        if (inside_disk(x, y, gx, gy, gr)) canvas.color[y * canvas.side + x] = kGerminalColor;
  }
}

double draw_radius(const SlideParams& params, Rng& rng) {
  if (params.radius_step <= 0.0) return rng.uniform(params.min_radius, params.max_radius);
  const auto levels = static_cast<std::uint64_t>(
      std::floor((params.max_radius - params.min_radius) / params.radius_step + 1e-9)) + 1;
  return params.min_radius + params.radius_step * static_cast<double>(rng.below(levels));
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

SyntheticSlide generate_slide(const SlideParams& params, std::uint64_t seed, std::uint64_t id) {
  if (params.grid == 0 || params.patch == 0) throw GenerationError("grid and patch must be positive");
  if (params.classes != kDefaultClassCount) {
    throw GenerationError("the generator plants exactly 4 classes, got classes=" + std::to_string(params.classes));
  }
  if (params.min_radius <= 0.0 || params.min_radius > params.max_radius ||
      2.0 * params.max_radius > static_cast<double>(params.grid)) {
    throw GenerationError("radius range [" + std::to_string(params.min_radius) + ", " +
                          std::to_string(params.max_radius) + "] tiles does not fit a " +
                          std::to_string(params.grid) + "-tile grid");
  }
  if (!(params.radius_step >= 0.0)) throw GenerationError("radius_step must be non-negative");
  if (params.min_structures > params.max_structures) throw GenerationError("min_structures exceeds max_structures");

  const std::size_t P = params.patch, G = params.grid, side = G * P;
  Rng layout(derive_seed(seed, 1));
  Rng texture(derive_seed(seed, 2));
  Rng noise(derive_seed(seed, 3));

  const std::size_t count = params.min_structures + layout.below(params.max_structures - params.min_structures + 1);
  std::vector<std::uint8_t> reserved(G * G, 0);  // structure footprints dilated by one tile
  std::vector<PlantedStructure> structures;

  // A crowded early layout can leave no room for later structures; such a
  // layout is discarded and redrawn from the same stream.
  bool complete = false;
  for (int restart = 0; restart < kLayoutRestarts && !complete; ++restart) {
    std::fill(reserved.begin(), reserved.end(), 0);
    structures.clear();
    complete = true;
    for (std::size_t s = 0; s < count && complete; ++s) {
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
        const double radius = draw_radius(params, layout);
        const double lo = std::ceil(radius - 0.5);
        const double hi = std::floor(static_cast<double>(G) - 0.5 - radius);
        if (hi < lo) continue;
        const auto span = static_cast<std::size_t>(hi - lo) + 1;
        const GridCoord center{static_cast<std::size_t>(lo) + layout.below(span),
                               static_cast<std::size_t>(lo) + layout.below(span)};
        const double cx = (static_cast<double>(center.col) + 0.5) * static_cast<double>(P);
        const double cy = (static_cast<double>(center.row) + 0.5) * static_cast<double>(P);
        const auto tiles = footprint(P, cx, cy, radius * static_cast<double>(P));
        if (std::any_of(tiles.begin(), tiles.end(), [&](GridCoord t) { return reserved[t.row * G + t.col]; })) continue;
        for (auto t : tiles)
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const auto r = static_cast<long>(t.row) + dr, c = static_cast<long>(t.col) + dc;
              if (r >= 0 && c >= 0 && r < static_cast<long>(G) && c < static_cast<long>(G)) reserved[r * G + c] = 1;
            }
        PlantedStructure ps;
        ps.center = center;
        ps.radius_tiles = radius;
        if (layout.bernoulli(params.gc_probability)) {
          ps.kind = kSecondary;
          ps.gc_tile = center;
        } else {
          ps.kind = layout.bernoulli(params.early_probability) ? kEarly : kPrimary;
        }
        structures.push_back(ps);
        placed = true;
      }
      complete = placed;
    }
  }
  if (!complete) {
    throw GenerationError("could not place " + std::to_string(count) + " structures in " +
                          std::to_string(kLayoutRestarts) + " layouts of " + std::to_string(kPlacementAttempts) +
                          " attempts each (grid " + std::to_string(G) + ", radius " +
                          std::to_string(params.min_radius) + "-" + std::to_string(params.max_radius) +
                          " tiles, seed " + std::to_string(seed) + ")");
  }

  Canvas canvas(side);
  for (const auto& s : structures) paint_structure(canvas, s, P, texture);

  SyntheticSlide slide;
  slide.id = id;
  slide.seed = seed;
  slide.params = params;
  slide.structures = std::move(structures);
  slide.labels = std::move(canvas.labels);
  slide.image = RgbImage(side, side);
  for (std::size_t i = 0; i < side * side; ++i) {
    const Rgb c = canvas.color[i];
    std::uint8_t* px = slide.image.pixels.data() + i * 3;
    px[0] = clamp_u8(c.r + noise.uniform(-params.noise, params.noise));
    px[1] = clamp_u8(c.g + noise.uniform(-params.noise, params.noise));
    px[2] = clamp_u8(c.b + noise.uniform(-params.noise, params.noise));
  }
  return slide;
}

std::uint8_t Tile::majority_label() const {
  std::array<std::size_t, 256> counts{};
  for (auto v : labels.values) ++counts[v];
  return static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::vector<std::size_t> TileGrid::foreground_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tiles.size(); ++i)
    if (tiles[i].foreground) out.push_back(i);
  return out;
}

std::size_t TileGrid::foreground_count() const {
  return static_cast<std::size_t>(std::count_if(tiles.begin(), tiles.end(), [](const Tile& t) { return t.foreground; }));
}

TileGrid tile_slide(const RgbImage& image, const LabelImage& labels, std::size_t patch, double foreground_fraction,
                    std::uint64_t slide_id) {
  if (patch == 0 || image.width % patch != 0 || image.height % patch != 0) {
    throw ShapeError("tile_slide: raster " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " is not divisible by patch " + std::to_string(patch));
  }
  if (labels.width != image.width || labels.height != image.height) {
    throw ShapeError("tile_slide: label raster size differs from image");
  }
  if (!(foreground_fraction > 0.0 && foreground_fraction <= 1.0)) {
    throw DomainError("tile_slide: foreground fraction must lie in (0, 1]");
  }
  const GrayImage gray = to_gray(image);
  const auto hist = gray_histogram(gray);
  TileGrid grid;
  grid.rows = image.height / patch;
  grid.cols = image.width / patch;
  grid.patch = patch;
  grid.slide_id = slide_id;
  grid.threshold = image.width * image.height != 0 ? otsu_threshold(hist) : std::nullopt;
  grid.tiles.reserve(grid.rows * grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      Tile t;
      t.coord = {r, c};
      t.pixels = RgbImage(patch, patch);
      t.labels = LabelImage(patch, patch);
      std::size_t dark = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) {
          const std::size_t sx = c * patch + x, sy = r * patch + y;
          std::copy_n(image.at(sx, sy), 3, t.pixels.at(x, y));
          t.labels.at(x, y) = labels.at(sx, sy);
          if (grid.threshold && gray.at(sx, sy) <= *grid.threshold) ++dark;
        }
      t.foreground = grid.threshold &&
                     static_cast<double>(dark) >= foreground_fraction * static_cast<double>(patch * patch);
      grid.tiles.push_back(std::move(t));
    }
  return grid;
}

TileGrid tile_slide(const SyntheticSlide& slide, std::size_t patch, double foreground_fraction) {
  return tile_slide(slide.image, slide.labels, patch, foreground_fraction, slide.id);
}

}  // namespace ctxseg
