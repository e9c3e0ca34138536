#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "stylseg/data/png_io.hpp"
#include "stylseg/grid.hpp"
#include "stylseg/tensor.hpp"

namespace stylseg {

/// Images are [C,H,W] float tensors with intensities in [0,1].
using Image = Tensor<float>;

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image image_from_raster(const Raster8& r) {
  Image img({r.channels, r.height, r.width});
  for (int c = 0; c < r.channels; ++c)
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x)
        img[(static_cast<std::size_t>(c) * r.height + y) * r.width + x] =
            static_cast<float>(r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + c] / 255.0);
  return img;
}

inline Raster8 raster_from_image(const Image& img) {
  if (img.rank() != 3) throw InputError("raster_from_image: expected [C,H,W], got " + shape_str(img.shape()));
  Raster8 r{img.dim(1), img.dim(2), img.dim(0), {}};
  r.pixels.resize(img.size());
  for (int c = 0; c < r.channels; ++c)
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x)
        r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + c] =
            quantize_unit(img[(static_cast<std::size_t>(c) * r.height + y) * r.width + x]);
  return r;
}

inline Raster8 raster_from_mask(const BinaryMask& m) {
  Raster8 r{m.height, m.width, 1, std::vector<std::uint8_t>(m.size())};
  for (std::size_t i = 0; i < m.size(); ++i) r.pixels[i] = m[i] ? 255 : 0;
  return r;
}

/// Gray raster binarized at > 127.
inline BinaryMask mask_from_raster(const Raster8& r) {
  if (r.channels != 1) throw InputError("mask_from_raster: expected a single-channel raster");
  BinaryMask m(r.height, r.width);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.pixels[i] > 127 ? 1 : 0;
  return m;
}

/// Bilinear resampling with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Image out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        auto px = [&](int yy, int xx) { return static_cast<double>(img[(static_cast<std::size_t>(ch) * h + yy) * w + xx]); };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) + wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        out[(static_cast<std::size_t>(ch) * out_h + y) * out_w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

/// Nearest-neighbour resampling (keeps masks binary and aligned with the
/// bilinear image path).
template <typename T>
Grid<T> resize_nearest(const Grid<T>& g, int out_h, int out_w) {
  if (g.height == out_h && g.width == out_w) return g;
  Grid<T> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(g.height - 1, static_cast<int>((y + 0.5) * g.height / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(g.width - 1, static_cast<int>((x + 0.5) * g.width / out_w));
      out.at(y, x) = g.at(sy, sx);
    }
  }
  return out;
}

/// Snaps intensities to the 8-bit grid, as a save/load round trip would.
inline Image quantized(const Image& img) {
  Image out = img;
  for (auto& v : out.storage()) v = static_cast<float>(quantize_unit(v) / 255.0);
  return out;
}

}  // namespace stylseg
