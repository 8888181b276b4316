#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace ctxseg {

// Interleaved 8-bit RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + (y * width + x) * 3; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return pixels.data() + (y * width + x) * 3; }

  bool operator==(const RgbImage&) const = default;
};

// Single-channel 8-bit raster (class indices or gray levels).
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), values(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return values[y * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

using LabelImage = GrayImage;

// ITU-R 601 luma, rounded to the nearest integer.
inline std::uint8_t luma(const std::uint8_t* rgb) {
  return static_cast<std::uint8_t>((299u * rgb[0] + 587u * rgb[1] + 114u * rgb[2] + 500u) / 1000u);
}

GrayImage to_gray(const RgbImage& image);

// PNG I/O; failures raise FormatError naming the path.
void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_png(const std::filesystem::path& path, const GrayImage& image);
RgbImage read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path);

}  // namespace ctxseg
