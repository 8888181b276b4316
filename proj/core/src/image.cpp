#include "ctxseg/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>

#include "ctxseg/error.hpp"

namespace ctxseg {

GrayImage to_gray(const RgbImage& image) {
  GrayImage out(image.width, image.height);
  for (std::size_t i = 0; i < image.width * image.height; ++i) out.values[i] = luma(image.pixels.data() + i * 3);
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(const std::filesystem::path& path, const std::string& what) {
  throw FormatError(path.string() + ": " + what);
}

void write_png_raw(const std::filesystem::path& path, std::size_t width, std::size_t height, int color_type,
                   std::size_t channels, const std::uint8_t* data) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) png_fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    png_fail(path, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    png_fail(path, "libpng write error");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Decodes any 8-bit PNG, returning interleaved samples with `channels` (1 or 3).
std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, std::size_t channels, std::size_t& width,
                                       std::size_t& height) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) png_fail(path, "cannot open for reading");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) png_fail(path, "not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "corrupt or truncated PNG");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !is_gray) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "expected a single-channel PNG");
  }
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != width * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "unexpected PNG sample layout");
  }
  std::vector<std::uint8_t> data(width * height * channels);
  for (std::size_t y = 0; y < height; ++y) png_read_row(png, data.data() + y * width * channels, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 3, image.pixels.data());
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  write_png_raw(path, image.width, image.height, PNG_COLOR_TYPE_GRAY, 1, image.values.data());
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
  RgbImage img;
  img.pixels = read_png_raw(path, 3, img.width, img.height);
  return img;
}

GrayImage read_png_gray(const std::filesystem::path& path) {
  GrayImage img;
  img.values = read_png_raw(path, 1, img.width, img.height);
  return img;
}

}  // namespace ctxseg
