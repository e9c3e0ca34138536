#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stylseg/error.hpp"

namespace stylseg {

/// Row-major 2-D array.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw InputError("grid dimensions must be positive");
  }
  Grid(int h, int w, std::vector<T> v) : height(h), width(w), values(std::move(v)) {
    if (h <= 0 || w <= 0) throw InputError("grid dimensions must be positive");
    if (values.size() != static_cast<std::size_t>(h) * w) throw InputError("grid data size mismatch");
  }

  std::size_t size() const { return values.size(); }
  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Boolean pixel grid stored as 0/1 bytes.
using BinaryMask = Grid<std::uint8_t>;
/// Per-pixel foreground probabilities in [0,1].
using ProbabilityMap = Grid<double>;

template <typename A, typename B>
void require_same_grid(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw InputError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

inline ProbabilityMap to_probability(const BinaryMask& m) {
  ProbabilityMap p(m.height, m.width);
  for (std::size_t i = 0; i < m.size(); ++i) p[i] = m[i] ? 1.0 : 0.0;
  return p;
}

inline BinaryMask binarize(const ProbabilityMap& p, double threshold) {
  BinaryMask m(p.height, p.width);
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] > threshold ? 1 : 0;
  return m;
}

}  // namespace stylseg
