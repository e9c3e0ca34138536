#pragma once

// Naive reference implementations of the metrics, written directly from the
// textbook constructions with explicit matrices and brute-force searches.
// Deliberately shares no helpers with the library.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace stylseg::oracle {

using Matrix = std::vector<std::vector<double>>;
constexpr double eps = 2.220446049250313e-16;

inline Matrix zeros(int h, int w) { return Matrix(h, std::vector<double>(w, 0.0)); }

inline double sum(const Matrix& m) {
  double s = 0;
  for (const auto& row : m)
    for (double v : row) s += v;
  return s;
}

inline double mean2(const Matrix& m) { return sum(m) / (m.size() * m[0].size()); }

inline double dice(const Matrix& a, const Matrix& b) {
  double inter = 0, size_a = 0, size_b = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) {
      inter += (a[i][j] == 1 && b[i][j] == 1);
      size_a += a[i][j] == 1;
      size_b += b[i][j] == 1;
    }
  if (size_a + size_b == 0) return 1.0;
  return 2 * inter / (size_a + size_b);
}

inline double iou(const Matrix& a, const Matrix& b) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) {
      inter += (a[i][j] == 1 && b[i][j] == 1);
      uni += (a[i][j] == 1 || b[i][j] == 1);
    }
  if (uni == 0) return 1.0;
  return inter / uni;
}

inline double specificity(const Matrix& pred, const Matrix& gt) {
  double tn = 0, fp = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = 0; j < gt[0].size(); ++j) {
      if (gt[i][j] == 0 && pred[i][j] == 0) tn += 1;
      if (gt[i][j] == 0 && pred[i][j] == 1) fp += 1;
    }
  if (tn + fp == 0) return 1.0;
  return tn / (tn + fp);
}

inline double mae(const Matrix& prob, const Matrix& gt) {
  double s = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = 0; j < gt[0].size(); ++j) s += std::fabs(prob[i][j] - gt[i][j]);
  return s / (gt.size() * gt[0].size());
}

// Weighted F-measure, beta^2 = 1.
inline double weighted_f(const Matrix& prob, const Matrix& gt) {
  const int h = static_cast<int>(gt.size()), w = static_cast<int>(gt[0].size());
  if (sum(gt) == 0) {
    for (const auto& row : prob)
      for (double v : row)
        if (v != 0) return 0.0;
    return 1.0;
  }
  Matrix e = zeros(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) e[i][j] = std::fabs(prob[i][j] - gt[i][j]);

  // Brute-force nearest foreground pixel; first hit in row-major order wins ties.
  Matrix dst = zeros(h, w), et = e;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (gt[i][j] == 1) continue;
      double best = std::numeric_limits<double>::infinity();
      int bi = -1, bj = -1;
      for (int p = 0; p < h; ++p)
        for (int q = 0; q < w; ++q)
          if (gt[p][q] == 1) {
            const double d2 = double(p - i) * (p - i) + double(q - j) * (q - j);
            if (d2 < best) {
              best = d2;
              bi = p;
              bj = q;
            }
          }
      dst[i][j] = std::sqrt(best);
      et[i][j] = e[bi][bj];
    }

  // 7x7 Gaussian, sigma 5, normalised; correlation with zero padding.
  double kernel[7][7], ks = 0;
  for (int a = 0; a < 7; ++a)
    for (int b = 0; b < 7; ++b) {
      kernel[a][b] = std::exp(-((a - 3.0) * (a - 3.0) + (b - 3.0) * (b - 3.0)) / (2 * 25.0));
      ks += kernel[a][b];
    }
  Matrix ea = zeros(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double s = 0;
      for (int a = 0; a < 7; ++a)
        for (int b = 0; b < 7; ++b) {
          const int p = i + a - 3, q = j + b - 3;
          if (p >= 0 && p < h && q >= 0 && q < w) s += kernel[a][b] / ks * et[p][q];
        }
      ea[i][j] = s;
    }

  double tpw = sum(gt), fpw = 0, ew_in = 0, n_in = 0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (gt[i][j] == 1) {
        const double m = ea[i][j] < e[i][j] ? ea[i][j] : e[i][j];
        tpw -= m;
        ew_in += m;
        n_in += 1;
      } else {
        fpw += e[i][j] * (2 - std::exp(std::log(1 - 0.5) / 5 * dst[i][j]));
      }
    }
  const double r = 1 - ew_in / n_in;
  const double p = tpw / (eps + tpw + fpw);
  double q = 2 * r * p / (eps + r + p);
  return q < 0 ? 0 : (q > 1 ? 1 : q);
}

inline double std_sample(const std::vector<double>& v) {
  if (v.size() <= 1) return 0;
  double m = 0;
  for (double x : v) m += x;
  m /= v.size();
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

inline double object(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double x = 0;
  for (double a : v) x += a;
  x /= v.size();
  return 2.0 * x / (x * x + 1.0 + std_sample(v) + eps);
}

inline double ssim(const Matrix& p, const Matrix& g) {
  const double n = static_cast<double>(p.size() * p[0].size());
  const double x = mean2(p), y = mean2(g);
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p[0].size(); ++j) {
      sx += (p[i][j] - x) * (p[i][j] - x);
      sy += (g[i][j] - y) * (g[i][j] - y);
      sxy += (p[i][j] - x) * (g[i][j] - y);
    }
  sx /= (n - 1 + eps);
  sy /= (n - 1 + eps);
  sxy /= (n - 1 + eps);
  const double alpha = 4 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0) return alpha / (beta + eps);
  if (alpha == 0 && beta == 0) return 1.0;
  return 0;
}

inline Matrix block(const Matrix& m, int r0, int r1, int c0, int c1) {
  Matrix out;
  for (int i = r0; i < r1; ++i) out.emplace_back(m[i].begin() + c0, m[i].begin() + c1);
  return out;
}

// Structure measure with alpha = 0.5.
inline double s_measure(const Matrix& prob, const Matrix& gt) {
  const int h = static_cast<int>(gt.size()), w = static_cast<int>(gt[0].size());
  const double y = mean2(gt);
  if (y == 0) return 1 - mean2(prob);
  if (y == 1) return mean2(prob);

  std::vector<double> fg, bg;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (gt[i][j] == 1) fg.push_back(prob[i][j]);
      else bg.push_back(1.0 - prob[i][j]);
    }
  const double so = y * object(fg) + (1 - y) * object(bg);

  // Centroid from column and row sums, 1-based, rounded half away from zero.
  double total = sum(gt), cx_num = 0, cy_num = 0;
  for (int j = 0; j < w; ++j) {
    double col = 0;
    for (int i = 0; i < h; ++i) col += gt[i][j];
    cx_num += col * (j + 1);
  }
  for (int i = 0; i < h; ++i) {
    double row = 0;
    for (int j = 0; j < w; ++j) row += gt[i][j];
    cy_num += row * (i + 1);
  }
  const int X = static_cast<int>(std::round(cx_num / total));
  const int Y = static_cast<int>(std::round(cy_num / total));
  const double area = double(h) * w;
  const double w1 = X * Y / area, w2 = (w - X) * Y / area, w3 = X * (h - Y) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  auto q = [&](int r0, int r1, int c0, int c1) {
    if (r1 <= r0 || c1 <= c0) return 0.0;
    return ssim(block(prob, r0, r1, c0, c1), block(gt, r0, r1, c0, c1));
  };
  const double sr = w1 * q(0, Y, 0, X) + w2 * q(0, Y, X, w) + w3 * q(Y, h, 0, X) + w4 * q(Y, h, X, w);
  double s = 0.5 * so + 0.5 * sr;
  return s < 0 ? 0 : (s > 1 ? 1 : s);
}

// Enhanced-alignment score of a hard map, averaged over all pixels.
inline double e_single(const Matrix& fm, const Matrix& gt) {
  const int h = static_cast<int>(gt.size()), w = static_cast<int>(gt[0].size());
  Matrix enhanced = zeros(h, w);
  const double gsum = sum(gt);
  if (gsum == 0) {
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) enhanced[i][j] = 1.0 - fm[i][j];
  } else if (gsum == double(h) * w) {
    enhanced = fm;
  } else {
    const double mf = mean2(fm), mg = mean2(gt);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double af = fm[i][j] - mf, ag = gt[i][j] - mg;
        const double align = 2 * (ag * af) / (ag * ag + af * af + eps);
        enhanced[i][j] = (align + 1) * (align + 1) / 4;
      }
  }
  return sum(enhanced) / (double(h) * w);
}

inline double e_measure_max(const Matrix& prob, const Matrix& gt, int thresholds = 256) {
  double best = -1;
  for (int k = 0; k < thresholds; ++k) {
    const double th = double(k) / thresholds;
    Matrix fm = prob;
    for (auto& row : fm)
      for (double& v : row) v = v >= th ? 1.0 : 0.0;
    const double s = e_single(fm, gt);
    if (s > best) best = s;
  }
  return best;
}

// Random pair generator covering soft, hard, quantised and degenerate maps.
struct Pair {
  Matrix prob, gt;
};

inline Pair random_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 16), mode(0, 9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int h = dim(rng), w = dim(rng);
  Pair p{zeros(h, w), zeros(h, w)};
  const int gt_mode = mode(rng), prob_mode = mode(rng);
  const double density = u(rng);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      p.gt[i][j] = gt_mode == 0 ? 0.0 : gt_mode == 1 ? 1.0 : (u(rng) < density ? 1.0 : 0.0);
      const double noise = u(rng);
      switch (prob_mode) {
        case 0: p.prob[i][j] = p.gt[i][j]; break;
        case 1: p.prob[i][j] = 1.0 - p.gt[i][j]; break;
        case 2: p.prob[i][j] = u(rng) < 0.5 ? 1.0 : 0.0; break;
        case 3: p.prob[i][j] = std::floor(noise * 256) / 255.0 > 1 ? 1.0 : std::floor(noise * 256) / 255.0; break;
        case 4: p.prob[i][j] = std::floor(noise * 8) / 8.0; break;
        case 5: p.prob[i][j] = 0.0; break;
        default: p.prob[i][j] = std::fabs(p.gt[i][j] - 0.6 * noise); break;
      }
    }
  return p;
}

}  // namespace stylseg::oracle
