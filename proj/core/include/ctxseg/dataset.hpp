#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxseg/synthwsi.hpp"

namespace ctxseg {

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& text);

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

// 6:2:2 by slide count: train = round(0.6 n), val = round(0.2 n), test = rest.
SplitCounts split_counts(std::size_t slides);

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> val;
  std::vector<std::uint64_t> test;
  SlideParams params;
  std::string params_digest;
  std::uint64_t seed = 0;
  double foreground_fraction = kDefaultForegroundFraction;

  const std::vector<std::uint64_t>& ids(Split s) const;
  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SyntheticSlide> slides;  // slides[i].id == i

  const SyntheticSlide& slide(std::uint64_t id) const;
};

// Slide i uses seed derive_seed(seed, i); split membership is a seeded
// shuffle of the ids.
Dataset synthesize_dataset(const SlideParams& params, std::size_t slides, std::uint64_t seed,
                           double foreground_fraction = kDefaultForegroundFraction);

std::string slide_dir_name(std::uint64_t id);

// Layout: slide_<id>/image.png, slide_<id>/labels.png, manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace ctxseg
