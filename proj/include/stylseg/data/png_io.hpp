#pragma once

#include <png.h>

#include <cstdint>
#include <string>
#include <vector>

#include "stylseg/error.hpp"

namespace stylseg {

/// 8-bit interleaved raster, 1 (gray) or 3 (RGB) channels.
struct Raster8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Decodes a PNG, converting to gray (channels == 1) or RGB (channels == 3).
inline Raster8 read_png(const std::string& path, int channels) {
  if (channels != 1 && channels != 3) throw InputError("read_png: channels must be 1 or 3");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw InputError("cannot decode image '" + path + "': " + image.message);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster8 r;
  r.height = static_cast<int>(image.height);
  r.width = static_cast<int>(image.width);
  r.channels = channels;
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw InputError("cannot decode image '" + path + "': " + msg);
  }
  return r;
}

inline void write_png(const std::string& path, const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw InputError("write_png: channels must be 1 or 3");
  if (r.pixels.size() != static_cast<std::size_t>(r.height) * r.width * r.channels) {
    throw InputError("write_png: pixel buffer size mismatch");
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, r.pixels.data(), 0, nullptr)) {
    throw InputError("cannot write image '" + path + "': " + image.message);
  }
}

}  // namespace stylseg
