#include "ctxseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw ConfigError("unknown split '" + text + "' (expected train, val or test)");
}

SplitCounts split_counts(std::size_t slides) {
  SplitCounts c;
  c.train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(slides)));
  c.val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(slides)));
  c.val = std::min(c.val, slides - c.train);
  c.test = slides - c.train - c.val;
  return c;
}

const std::vector<std::uint64_t>& DatasetManifest::ids(Split s) const {
  switch (s) {
    case Split::Train:
      return train;
    case Split::Val:
      return val;
    case Split::Test:
      break;
  }
  return test;
}

const SyntheticSlide& Dataset::slide(std::uint64_t id) const {
  if (id >= slides.size() || slides[id].id != id) throw IndexError("no slide with id " + std::to_string(id));
  return slides[id];
}

Dataset synthesize_dataset(const SlideParams& params, std::size_t count, std::uint64_t seed,
                           double foreground_fraction) {
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) ds.slides.push_back(generate_slide(params, derive_seed(seed, i), i));

  std::vector<std::uint64_t> order(count);
  std::iota(order.begin(), order.end(), std::uint64_t{0});
  Rng rng(derive_seed(seed, 0xD5A7A5E7ull));
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const SplitCounts sc = split_counts(count);
  auto& m = ds.manifest;
  m.class_names = default_class_names();
  m.train.assign(order.begin(), order.begin() + sc.train);
  m.val.assign(order.begin() + sc.train, order.begin() + sc.train + sc.val);
  m.test.assign(order.begin() + sc.train + sc.val, order.end());
  for (auto* ids : {&m.train, &m.val, &m.test}) std::sort(ids->begin(), ids->end());
  m.params = params;
  m.params_digest = params_digest(params);
  m.seed = seed;
  m.foreground_fraction = foreground_fraction;
  return ds;
}

std::string slide_dir_name(std::uint64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "slide_%04llu", static_cast<unsigned long long>(id));
  return buf;
}

namespace {

json params_to_json(const SlideParams& p) {
  return json{{"grid", p.grid},
              {"patch", p.patch},
              {"min_structures", p.min_structures},
              {"max_structures", p.max_structures},
              {"min_radius", p.min_radius},
              {"max_radius", p.max_radius},
              {"radius_step", p.radius_step},
              {"gc_probability", p.gc_probability},
              {"early_probability", p.early_probability},
              {"noise", p.noise},
              {"classes", p.classes}};
}

SlideParams params_from_json(const json& j) {
  SlideParams p;
  p.grid = j.at("grid").get<std::size_t>();
  p.patch = j.at("patch").get<std::size_t>();
  p.min_structures = j.at("min_structures").get<std::size_t>();
  p.max_structures = j.at("max_structures").get<std::size_t>();
  p.min_radius = j.at("min_radius").get<double>();
  p.max_radius = j.at("max_radius").get<double>();
  p.radius_step = j.at("radius_step").get<double>();
  p.gc_probability = j.at("gc_probability").get<double>();
  p.early_probability = j.at("early_probability").get<double>();
  p.noise = j.at("noise").get<double>();
  p.classes = j.at("classes").get<std::size_t>();
  return p;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(dir.string() + ": cannot create directory: " + ec.message());
  for (const auto& slide : dataset.slides) {
    const fs::path sdir = dir / slide_dir_name(slide.id);
    fs::create_directories(sdir, ec);
    if (ec) throw FormatError(sdir.string() + ": cannot create directory: " + ec.message());
    write_png(sdir / "image.png", slide.image);
    write_png(sdir / "labels.png", slide.labels);
  }
  const auto& m = dataset.manifest;
  json j{{"format", "ctxseg-dataset"},
         {"version", 1},
         {"class_names", m.class_names},
         {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
         {"params", params_to_json(m.params)},
         {"params_digest", m.params_digest},
         {"seed", m.seed},
         {"foreground_fraction", m.foreground_fraction},
         {"slides", dataset.slides.size()}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw FormatError((dir / "manifest.json").string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw FormatError(manifest_path.string() + ": missing manifest");
  Dataset ds;
  std::size_t count = 0;
  try {
    const json j = json::parse(in);
    auto& m = ds.manifest;
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.train = j.at("splits").at("train").get<std::vector<std::uint64_t>>();
    m.val = j.at("splits").at("val").get<std::vector<std::uint64_t>>();
    m.test = j.at("splits").at("test").get<std::vector<std::uint64_t>>();
    m.params = params_from_json(j.at("params"));
    m.params_digest = j.at("params_digest").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.foreground_fraction = j.at("foreground_fraction").get<double>();
    count = j.at("slides").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  if (ds.manifest.params_digest != params_digest(ds.manifest.params)) {
    throw FormatError(manifest_path.string() + ": params digest does not match params");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto sdir = dir / slide_dir_name(i);
    for (const char* name : {"image.png", "labels.png"})
      if (!std::filesystem::exists(sdir / name)) throw FormatError((sdir / name).string() + ": missing file");
    SyntheticSlide s;
    s.id = i;
    s.seed = derive_seed(ds.manifest.seed, i);
    s.params = ds.manifest.params;
    s.image = read_png_rgb(sdir / "image.png");
    s.labels = read_png_gray(sdir / "labels.png");
    if (s.image.width != s.labels.width || s.image.height != s.labels.height) {
      throw FormatError(sdir.string() + ": image and labels differ in size");
    }
    ds.slides.push_back(std::move(s));
  }
  return ds;
}

}  // namespace ctxseg
