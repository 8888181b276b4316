#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <queue>
#include <set>

#include "ctxseg/dataset.hpp"
#include "ctxseg/error.hpp"
#include "ctxseg/rng.hpp"
#include "ctxseg/synthwsi.hpp"

using namespace ctxseg;
namespace fs = std::filesystem;

namespace {

// Exhaustive Otsu: between-class variance of {v <= t} vs {v > t} for every t,
// computed from scratch per threshold.
std::optional<std::uint8_t> otsu_oracle(const std::array<std::uint64_t, 256>& h) {
  double best = 0.0;
  std::optional<std::uint8_t> best_t;
  for (int t = 0; t < 256; ++t) {
    double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (int v = 0; v < 256; ++v) {
      const double c = static_cast<double>(h[v]);
      if (v <= t) {
        n0 += c;
        s0 += c * v;
      } else {
        n1 += c;
        s1 += c * v;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const double n = n0 + n1;
    const double d = s0 / n0 - s1 / n1;
    const double between = (n0 / n) * (n1 / n) * d * d;
    if (between > best) {
      best = between;
      best_t = static_cast<std::uint8_t>(t);
    }
  }
  return best_t;
}

std::array<std::uint64_t, 256> hist_of(std::initializer_list<int> values) {
  std::array<std::uint64_t, 256> h{};
  for (int v : values) ++h[v];
  return h;
}

SlideParams small_params() {
  SlideParams p;
  p.grid = 8;
  p.patch = 16;
  p.max_radius = 2.0;
  p.max_structures = 3;
  return p;
}

std::size_t sel_components(const LabelImage& labels) {
  std::vector<std::uint8_t> seen(labels.values.size(), 0);
  std::size_t components = 0;
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    if (labels.values[i] != kSecondary || seen[i]) continue;
    ++components;
    std::queue<std::size_t> q;
    q.push(i);
    seen[i] = 1;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t x = p % labels.width, y = p / labels.width;
      const std::size_t nb[4] = {x > 0 ? p - 1 : p, x + 1 < labels.width ? p + 1 : p,
                                 y > 0 ? p - labels.width : p, y + 1 < labels.height ? p + labels.width : p};
      for (std::size_t n : nb)
        if (!seen[n] && labels.values[n] == kSecondary) {
          seen[n] = 1;
          q.push(n);
        }
    }
  }
  return components;
}

}  // namespace

TEST_CASE("otsu examples") {
  const auto h = hist_of({1, 1, 1, 9, 9});
  const auto t = otsu_threshold(h);
  REQUIRE(t.has_value());
  CHECK(*t == *otsu_oracle(h));
  CHECK(*t >= 1);
  CHECK(*t < 9);

  CHECK_FALSE(otsu_threshold(hist_of({7, 7, 7, 7})).has_value());

  // Equal deltas at 20 and 200: every t in [20, 199] is optimal; the smallest wins.
  std::array<std::uint64_t, 256> two{};
  two[20] = 50;
  two[200] = 50;
  CHECK(*otsu_threshold(two) == 20);
  CHECK(*otsu_oracle(two) == 20);

  std::array<std::uint64_t, 256> empty{};
  CHECK_THROWS_AS(otsu_threshold(empty), DomainError);
  CHECK_THROWS_AS(otsu_threshold(std::span<const std::uint64_t>()), DomainError);
}

TEST_CASE("otsu agrees with the exhaustive oracle on random histograms") {
  Rng rng(123);
  for (int trial = 0; trial < 300; ++trial) {
    std::array<std::uint64_t, 256> h{};
    const std::size_t bins = 1 + rng.below(8);
    for (std::size_t b = 0; b < bins; ++b) h[rng.below(256)] += 1 + rng.below(1000);
    CHECK(otsu_threshold(h) == otsu_oracle(h));
  }
}

TEST_CASE("generator is deterministic in params and seed") {
  const auto p = small_params();
  const auto a = generate_slide(p, 99), b = generate_slide(p, 99), c = generate_slide(p, 100);
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(a.image == c.image);
  CHECK(a.image.width == p.grid * p.patch);
}

TEST_CASE("zero structures give an all-background slide") {
  auto p = small_params();
  p.min_structures = p.max_structures = 0;
  const auto s = generate_slide(p, 3);
  for (auto v : s.labels.values) CHECK(v == kBackground);
  CHECK(s.structures.empty());
}

TEST_CASE("a single SEL structure is one region with one germinal tile") {
  auto p = small_params();
  p.min_structures = p.max_structures = 1;
  p.gc_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_slide(p, seed);
    CHECK(sel_components(s.labels) == 1);
    // Pale pixels inside the SEL region mark the germinal tile.
    std::set<std::pair<std::size_t, std::size_t>> pale_tiles;
    for (std::size_t y = 0; y < s.labels.height; ++y)
      for (std::size_t x = 0; x < s.labels.width; ++x)
        if (s.labels.at(x, y) == kSecondary && luma(s.image.at(x, y)) > 140) {
          pale_tiles.insert({y / p.patch, x / p.patch});
        }
    CHECK(pale_tiles.size() == 1);
    REQUIRE(s.structures.size() == 1);
    REQUIRE(s.structures[0].gc_tile.has_value());
    CHECK(pale_tiles.begin()->first == s.structures[0].gc_tile->row);
    CHECK(pale_tiles.begin()->second == s.structures[0].gc_tile->col);
  }
}

TEST_CASE("generated labels and structures respect the class contract") {
  const auto p = SlideParams{};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = generate_slide(p, seed);
    for (auto v : s.labels.values) CHECK(v < kDefaultClassCount);
    for (const auto& st : s.structures) {
      CHECK(st.radius_tiles >= p.min_radius);
      CHECK(st.radius_tiles <= p.max_radius);
      CHECK(st.gc_tile.has_value() == (st.kind == kSecondary));
      const double steps = (st.radius_tiles - p.min_radius) / p.radius_step;
      CHECK(std::abs(steps - std::round(steps)) < 1e-9);
    }
  }
}

TEST_CASE("generator rejects impossible layouts") {
  auto p = small_params();
  p.max_radius = 5.0;
  CHECK_THROWS_AS(generate_slide(p, 0), GenerationError);
  p = small_params();
  p.min_structures = p.max_structures = 40;
  CHECK_THROWS_AS(generate_slide(p, 0), GenerationError);
}

TEST_CASE("non-germinal SEL tiles cannot be told from PET tiles by pixel statistics") {
  // Nearest-centroid classifier on per-tile colour statistics, trained and
  // tested on disjoint slides. Only fully covered tiles are used so that the
  // structure outline does not leak the disk size.
  struct Sample {
    std::array<double, 7> f;
    bool sel;
  };
  const auto features = [](const Tile& t) {
    std::array<double, 7> f{};
    const double n = static_cast<double>(t.pixels.width * t.pixels.height);
    double dark = 0.0;
    for (std::size_t i = 0; i < t.pixels.width * t.pixels.height; ++i) {
      const std::uint8_t* px = t.pixels.pixels.data() + i * 3;
      for (int c = 0; c < 3; ++c) {
        f[c] += px[c] / n;
        f[3 + c] += px[c] * px[c] / n;
      }
      dark += luma(px) < 50 ? 1.0 : 0.0;
    }
    for (int c = 0; c < 3; ++c) f[3 + c] = std::sqrt(std::max(0.0, f[3 + c] - f[c] * f[c]));
    f[6] = 100.0 * dark / n;
    return f;
  };
  const auto collect = [&](std::uint64_t first, std::uint64_t count) {
    std::vector<Sample> out;
    for (std::uint64_t seed = first; seed < first + count; ++seed) {
      const auto slide = generate_slide(SlideParams{}, seed);
      const auto grid = tile_slide(slide, 32);
      std::set<std::pair<std::size_t, std::size_t>> germinal;
      for (const auto& st : slide.structures)
        if (st.gc_tile) germinal.insert({st.gc_tile->row, st.gc_tile->col});
      for (const auto& t : grid.tiles) {
        const std::uint8_t cls = t.labels.values.front();
        if ((cls != kPrimary && cls != kSecondary) || germinal.count({t.coord.row, t.coord.col})) continue;
        bool full = true;
        for (auto v : t.labels.values) full = full && v == cls;
        if (full) out.push_back({features(t), cls == kSecondary});
      }
    }
    return out;
  };
  const auto train = collect(1000, 60), test = collect(2000, 60);
  std::array<double, 7> mu_sel{}, mu_pet{};
  double n_sel = 0, n_pet = 0;
  for (const auto& s : train) {
    auto& mu = s.sel ? mu_sel : mu_pet;
    (s.sel ? n_sel : n_pet) += 1;
    for (int i = 0; i < 7; ++i) mu[i] += s.f[i];
  }
  REQUIRE(n_sel > 20);
  REQUIRE(n_pet > 20);
  for (int i = 0; i < 7; ++i) {
    mu_sel[i] /= n_sel;
    mu_pet[i] /= n_pet;
  }
  // Balanced accuracy on the held-out slides.
  double hit_sel = 0, all_sel = 0, hit_pet = 0, all_pet = 0;
  for (const auto& s : test) {
    double d_sel = 0, d_pet = 0;
    for (int i = 0; i < 7; ++i) {
      d_sel += (s.f[i] - mu_sel[i]) * (s.f[i] - mu_sel[i]);
      d_pet += (s.f[i] - mu_pet[i]) * (s.f[i] - mu_pet[i]);
    }
    const bool says_sel = d_sel < d_pet;
    if (s.sel) {
      all_sel += 1;
      hit_sel += says_sel;
    } else {
      all_pet += 1;
      hit_pet += !says_sel;
    }
  }
  const double accuracy = 0.5 * (hit_sel / all_sel + hit_pet / all_pet);
  MESSAGE("SEL-vs-PET balanced accuracy from tile statistics: " << accuracy);
  CHECK(accuracy <= 0.55);
}

TEST_CASE("tile_slide examples") {
  RgbImage img(64, 64, 255);
  LabelImage lab(64, 64, 0);
  const auto g = tile_slide(img, lab, 32);
  CHECK(g.rows == 2);
  CHECK(g.cols == 2);
  CHECK(g.tiles.size() == 4);
  CHECK(g.foreground_count() == 0);

  CHECK_THROWS_AS(tile_slide(RgbImage(60, 64), LabelImage(60, 64), 32), ShapeError);
  CHECK_THROWS_AS(tile_slide(img, lab, 32, 0.0), DomainError);
}

TEST_CASE("one dark disk marks exactly the tiles the pixel-count oracle selects") {
  RgbImage img(64, 64, 250);
  LabelImage lab(64, 64, 0);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const double dx = x + 0.5 - 24.0, dy = y + 0.5 - 24.0;
      if (dx * dx + dy * dy < 16.0 * 16.0) {
        auto* px = img.at(x, y);
        px[0] = px[1] = px[2] = 20;
      }
    }
  const double tau = 0.1;
  const auto grid = tile_slide(img, lab, 32, tau);
  const auto t = otsu_oracle(gray_histogram(to_gray(img)));
  REQUIRE(t.has_value());
  std::size_t expected = 0;
  for (const auto& tile : grid.tiles) {
    std::size_t dark = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) dark += luma(img.at(tile.coord.col * 32 + x, tile.coord.row * 32 + y)) <= *t;
    const bool fg = static_cast<double>(dark) / 1024.0 >= tau;
    CHECK(tile.foreground == fg);
    expected += fg;
  }
  CHECK(expected == 3);
  CHECK(grid.foreground_count() == 3);
  CHECK_FALSE(grid.tile(1, 1).foreground);
}

TEST_CASE("tiles partition the raster") {
  const auto slide = generate_slide(small_params(), 4);
  const auto grid = tile_slide(slide, 16);
  CHECK(grid.tiles.size() == 64);
  for (const auto& t : grid.tiles)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const std::size_t gx = t.coord.col * 16 + x, gy = t.coord.row * 16 + y;
        for (int c = 0; c < 3; ++c) CHECK(t.pixels.at(x, y)[c] == slide.image.at(gx, gy)[c]);
        CHECK(t.labels.at(x, y) == slide.labels.at(gx, gy));
      }
}

TEST_CASE("dataset split counts and persistence") {
  const auto c = split_counts(10);
  CHECK(c.train == 6);
  CHECK(c.val == 2);
  CHECK(c.test == 2);

  const auto ds = synthesize_dataset(small_params(), 10, 7);
  std::set<std::uint64_t> all;
  for (auto s : {Split::Train, Split::Val, Split::Test})
    for (auto id : ds.manifest.ids(s)) CHECK(all.insert(id).second);
  CHECK(all.size() == 10);

  const fs::path dir = fs::temp_directory_path() / "ctxseg_unit_dataset";
  fs::remove_all(dir);
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  CHECK(back.manifest == ds.manifest);
  REQUIRE(back.slides.size() == ds.slides.size());
  for (std::size_t i = 0; i < ds.slides.size(); ++i) {
    CHECK(back.slides[i].image == ds.slides[i].image);
    CHECK(back.slides[i].labels == ds.slides[i].labels);
  }

  fs::remove(dir / slide_dir_name(3) / "labels.png");
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}
