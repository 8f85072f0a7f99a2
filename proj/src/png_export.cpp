#include "msdpn/png_export.hpp"

#include "msdpn/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace msdpn {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_depth_png16(const std::filesystem::path& path, const DepthImage& depth) {
  if (depth.rank() != 2) throw ShapeError("depth PNG export expects an H x W image");
  const auto H = static_cast<png_uint_32>(depth.dim(0)), W = static_cast<png_uint_32>(depth.dim(1));
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw MissingFileError(path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(W) * 2);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, W, H, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 v = 0; v < H; ++v) {
    for (png_uint_32 u = 0; u < W; ++u) {
      const double mm = std::round(static_cast<double>(depth.at(v, u)) * 1000.0);
      const auto val = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
      row[2 * u] = static_cast<png_byte>(val >> 8);  // PNG is big-endian
      row[2 * u + 1] = static_cast<png_byte>(val & 0xFF);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

DepthImage read_depth_png16(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw MissingFileError(path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  DepthImage out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": not a readable PNG");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const png_uint_32 W = png_get_image_width(png, info), H = png_get_image_height(png, info);
  if (png_get_bit_depth(png, info) != 16 || png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": expected 16-bit grayscale PNG");
  }
  out = DepthImage({static_cast<std::int64_t>(H), static_cast<std::int64_t>(W)});
  std::vector<png_byte> row(static_cast<std::size_t>(W) * 2);
  for (png_uint_32 v = 0; v < H; ++v) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 u = 0; u < W; ++u) {
      const unsigned val = (static_cast<unsigned>(row[2 * u]) << 8) | row[2 * u + 1];
      out.at(v, u) = static_cast<float>(val / 1000.0);
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace msdpn
