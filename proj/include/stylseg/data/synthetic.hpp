#pragma once

// Seeded two-domain generator: lesions with a shared geometry distribution
// composited over backgrounds whose colour and texture differ per domain.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stylseg/data/dataset.hpp"

namespace stylseg {

struct StyleDescriptor {
  std::string texture = "smooth";  // smooth | stripes | blotches
  double hue_min = 340.0;          // background hue range, degrees
  double hue_max = 360.0;
  double saturation = 0.35;
  double value = 0.92;
  double texture_strength = 0.06;  // amplitude of the value modulation
  double lesion_hue_offset = 15.0;
  double lesion_saturation = 0.75;
  double lesion_value = 0.55;
  double noise = 0.02;  // per-pixel Gaussian noise stddev
};

struct LesionDescriptor {
  std::string shape = "blob";  // ellipse | blob
  double radius_min = 0.10;    // fraction of image size
  double radius_max = 0.22;
  int count_min = 1;
  int count_max = 1;
};

struct SynthConfig {
  int count = 200;         // source samples
  int target_count = 0;    // target samples; 0 means same as count
  int image_size = 64;
  std::uint64_t seed = 0;
  StyleDescriptor source;
  StyleDescriptor target = default_target_style();
  LesionDescriptor lesion;

  static StyleDescriptor default_target_style() {
    StyleDescriptor s;
    s.texture = "blotches";
    s.hue_min = 160.0;
    s.hue_max = 185.0;
    s.saturation = 0.30;
    s.value = 0.50;
    s.lesion_hue_offset = -150.0;
    s.lesion_saturation = 0.55;
    s.lesion_value = 0.28;
    s.noise = 0.02;
    return s;
  }
};

inline std::array<double, 3> hsv_to_rgb(double h_deg, double s, double v) {
  double h = std::fmod(h_deg, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

/// Hue in degrees [0,360); 0 for achromatic colours.
inline double rgb_hue(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  if (d <= 0) return 0.0;
  double h;
  if (mx == r) h = 60.0 * std::fmod((g - b) / d, 6.0);
  else if (mx == g) h = 60.0 * ((b - r) / d + 2.0);
  else h = 60.0 * ((r - g) / d + 4.0);
  return h < 0 ? h + 360.0 : h;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct LesionShape {
  double cx, cy, rx, ry, angle;
  std::array<double, 4> wobble;  // amplitudes/phases of the blob boundary

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (ca * dx + sa * dy) / rx;
    const double v = (-sa * dx + ca * dy) / ry;
    const double r = std::sqrt(u * u + v * v);
    const double phi = std::atan2(v, u);
    const double limit = 1.0 + wobble[0] * std::sin(2 * phi + wobble[1]) + wobble[2] * std::sin(3 * phi + wobble[3]);
    return r <= limit;
  }
};

inline void render_sample(Sample& s, const StyleDescriptor& style, const LesionDescriptor& lesion, int size,
                          std::uint64_t stream) {
  Rng rng(splitmix64(stream));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Geometry first, from its own stream, so both domains share one distribution.
  Rng geo_rng(splitmix64(stream ^ 0x5bd1e995ULL));
  std::uniform_real_distribution<double> gunit(0.0, 1.0);
  auto guniform = [&](double lo, double hi) { return lo + (hi - lo) * gunit(geo_rng); };
  std::uniform_int_distribution<int> count_dist(lesion.count_min, lesion.count_max);
  const int count = count_dist(geo_rng);
  std::vector<LesionShape> shapes;
  for (int i = 0; i < count; ++i) {
    LesionShape sh{};
    sh.rx = guniform(lesion.radius_min, lesion.radius_max) * size;
    sh.ry = guniform(lesion.radius_min, lesion.radius_max) * size;
    const double margin = std::max(sh.rx, sh.ry) * 1.2 + 1.0;
    sh.cx = guniform(margin, std::max(margin, size - margin));
    sh.cy = guniform(margin, std::max(margin, size - margin));
    sh.angle = guniform(0.0, std::numbers::pi);
    if (lesion.shape == "blob") {
      sh.wobble = {guniform(0.05, 0.18), guniform(0.0, 6.283), guniform(0.0, 0.12), guniform(0.0, 6.283)};
    } else {
      sh.wobble = {0.0, 0.0, 0.0, 0.0};
    }
    shapes.push_back(sh);
  }

  const double hue = uniform(style.hue_min, style.hue_max);
  const auto bg = hsv_to_rgb(hue, style.saturation, style.value);
  const auto fg = hsv_to_rgb(hue + style.lesion_hue_offset, style.lesion_saturation, style.lesion_value);

  // Texture field in [-1, 1].
  const double dir = uniform(0.0, 2 * std::numbers::pi);
  const double freq = uniform(2.0, 4.0);
  const double phase = uniform(0.0, 2 * std::numbers::pi);
  std::array<std::array<double, 3>, 4> bumps{};
  for (auto& b : bumps) b = {uniform(0.0, size), uniform(0.0, size), uniform(0.15, 0.35) * size};
  auto texture = [&](double x, double y) {
    const double u = (std::cos(dir) * x + std::sin(dir) * y) / size;
    if (style.texture == "stripes") return std::sin(2 * std::numbers::pi * freq * u + phase);
    if (style.texture == "blotches") {
      double acc = -1.0;
      for (const auto& b : bumps) {
        const double d2 = (x - b[0]) * (x - b[0]) + (y - b[1]) * (y - b[1]);
        acc += 1.2 * std::exp(-d2 / (2 * b[2] * b[2]));
      }
      return std::clamp(acc, -1.0, 1.0);
    }
    return 2.0 * u - 1.0;  // smooth gradient
  };

  std::normal_distribution<double> noise(0.0, style.noise > 0 ? style.noise : 1.0);
  s.image = Image({3, size, size});
  s.mask = BinaryMask(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      for (const auto& sh : shapes) inside = inside || sh.contains(px, py);
      s.mask->at(y, x) = inside ? 1 : 0;
      const double shade = 1.0 + style.texture_strength * texture(px, py);
      const auto& base = inside ? fg : bg;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] * shade;
        if (style.noise > 0) v += noise(rng);
        s.image[(static_cast<std::size_t>(c) * size + y) * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

inline void validate(const StyleDescriptor& s, const char* which) {
  const std::string w = which;
  if (s.texture != "smooth" && s.texture != "stripes" && s.texture != "blotches") {
    throw InputError(w + " texture must be smooth, stripes or blotches");
  }
  if (s.hue_max < s.hue_min) throw InputError(w + " hue range is empty");
  for (double v : {s.saturation, s.value, s.lesion_saturation, s.lesion_value}) {
    if (v < 0 || v > 1) throw InputError(w + " saturation/value entries must lie in [0,1]");
  }
  if (s.noise < 0 || s.texture_strength < 0) throw InputError(w + " noise and texture strength must be >= 0");
}

}  // namespace detail

/// Emits (source, target) sample lists with exact lesion masks.
inline std::pair<std::vector<Sample>, std::vector<Sample>> generate_synthetic(const SynthConfig& config) {
  if (config.count < 1) throw InputError("synthetic count must be >= 1");
  if (config.target_count < 0) throw InputError("synthetic target_count must be >= 0");
  if (config.image_size < 8) throw InputError("synthetic image_size must be >= 8");
  const auto& l = config.lesion;
  if (l.shape != "ellipse" && l.shape != "blob") throw InputError("lesion shape must be ellipse or blob");
  if (!(l.radius_min > 0 && l.radius_max >= l.radius_min && l.radius_max < 0.5)) {
    throw InputError("lesion radius range must satisfy 0 < min <= max < 0.5");
  }
  if (l.count_min < 1 || l.count_max < l.count_min) throw InputError("lesion count range is degenerate");
  detail::validate(config.source, "source");
  detail::validate(config.target, "target");

  auto make = [&](const StyleDescriptor& style, int n, const std::string& tag, std::uint64_t salt) {
    std::vector<Sample> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Sample& s = out[static_cast<std::size_t>(i)];
      char id[32];
      std::snprintf(id, sizeof(id), "%s_%04d", tag.c_str(), i);
      s.id = id;
      s.domain_tag = tag;
      const std::uint64_t stream = detail::splitmix64(config.seed) ^ (salt * 0x100000001b3ULL) ^ static_cast<std::uint64_t>(i);
      detail::render_sample(s, style, config.lesion, config.image_size, detail::splitmix64(stream));
      // Stored datasets are 8-bit; keep in-memory samples identical to what a reload yields.
      s.image = quantized(s.image);
    }
    return out;
  };
  const int target_n = config.target_count > 0 ? config.target_count : config.count;
  return {make(config.source, config.count, "source", 1), make(config.target, target_n, "target", 2)};
}

/// Broad-style corpus: every image draws its own random colours and texture.
/// Used to pretrain generic models that have not seen either domain.
inline std::vector<Sample> generate_style_corpus(int count, int image_size, std::uint64_t seed,
                                                 const LesionDescriptor& lesion = {}) {
  if (count < 1) throw InputError("corpus count must be >= 1");
  if (image_size < 8) throw InputError("corpus image_size must be >= 8");
  static const char* kTextures[] = {"smooth", "stripes", "blotches"};
  std::vector<Sample> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t stream = detail::splitmix64(detail::splitmix64(seed) ^ (3 * 0x100000001b3ULL) ^ static_cast<std::uint64_t>(i));
    Rng rng(stream ^ 0x2545f4914f6cdd1dULL);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    StyleDescriptor style;
    style.texture = kTextures[static_cast<int>(u(rng) * 3) % 3];
    style.hue_min = 360.0 * u(rng);
    style.hue_max = style.hue_min + 30.0 * u(rng);
    style.saturation = 0.1 + 0.7 * u(rng);
    style.value = 0.3 + 0.65 * u(rng);
    style.texture_strength = 0.12 * u(rng);
    style.lesion_hue_offset = -180.0 + 360.0 * u(rng);
    style.lesion_saturation = 0.1 + 0.8 * u(rng);
    style.lesion_value = std::clamp(style.value + (u(rng) < 0.5 ? -1.0 : 1.0) * (0.15 + 0.35 * u(rng)), 0.05, 1.0);
    Sample& s = out[static_cast<std::size_t>(i)];
    char id[32];
    std::snprintf(id, sizeof(id), "corpus_%04d", i);
    s.id = id;
    s.domain_tag = "corpus";
    detail::render_sample(s, style, lesion, image_size, detail::splitmix64(stream));
    s.image = quantized(s.image);
  }
  return out;
}

}  // namespace stylseg
