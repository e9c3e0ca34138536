#pragma once

// Segmentation metrics: overlap scores from the confusion matrix plus the
// structural metrics used for polyp/lesion benchmarks (weighted F-measure,
// structure measure, enhanced-alignment measure) and MAE.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "stylseg/data/dataset.hpp"
#include "stylseg/data/image.hpp"
#include "stylseg/data/png_io.hpp"
#include "stylseg/grid.hpp"

namespace stylseg {

/// MATLAB's eps, used by the reference constructions as a division guard.
inline constexpr double kMetricEps = 2.220446049250313e-16;

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_grid(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2TP/(2TP+FP+FN); 1 when both masks are empty.
inline double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = confusion(pred, gt);
  const std::int64_t d = 2 * c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(d);
}

/// TP/(TP+FP+FN); 1 when both masks are empty.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = confusion(pred, gt);
  const std::int64_t d = c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}

/// TN/(TN+FP); 1 when gt has no negatives.
inline double specificity(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = confusion(pred, gt);
  const std::int64_t d = c.tn + c.fp;
  return d == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(d);
}

inline void check_probability(const ProbabilityMap& prob, const char* what) {
  for (double v : prob.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError(std::string(what) + ": probability outside [0,1]");
  }
}

inline double mae(const ProbabilityMap& prob, const BinaryMask& gt) {
  require_same_grid(prob, gt, "mae");
  double s = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) s += std::abs(prob[i] - (gt[i] ? 1.0 : 0.0));
  return s / static_cast<double>(gt.size());
}

namespace detail {

/// Nearest gt pixel (Euclidean) for every pixel; ties go to the smallest
/// row-major index. Returns squared distances and indices. Requires a
/// non-empty gt.
inline void nearest_foreground(const BinaryMask& gt, std::vector<std::int64_t>& dist2, std::vector<std::size_t>& index) {
  const int h = gt.height, w = gt.width;
  dist2.assign(gt.size(), 0);
  index.assign(gt.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t here = static_cast<std::size_t>(y) * w + x;
      if (gt[here]) {
        index[here] = here;
        continue;
      }
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      std::size_t best_idx = 0;
      auto consider = [&](int yy, int xx) {
        const std::size_t k = static_cast<std::size_t>(yy) * w + xx;
        if (!gt[k]) return;
        const std::int64_t d = static_cast<std::int64_t>(yy - y) * (yy - y) + static_cast<std::int64_t>(xx - x) * (xx - x);
        if (d < best || (d == best && k < best_idx)) {
          best = d;
          best_idx = k;
        }
      };
      // Chebyshev rings: every pixel on ring r is at least r away, so stop
      // once r*r exceeds the best squared distance.
      for (int r = 1; r <= std::max(h, w) && static_cast<std::int64_t>(r) * r <= best; ++r) {
        for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
          if (yy == y - r || yy == y + r) {
            for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) consider(yy, xx);
          } else {
            if (x - r >= 0) consider(yy, x - r);
            if (x + r < w) consider(yy, x + r);
          }
        }
      }
      dist2[here] = best;
      index[here] = best_idx;
    }
}

/// Normalised 1-D Gaussian taps; the outer product equals the normalised
/// 2-D kernel.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double half = (size - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - half;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

/// Correlation with a separable kernel, zero padding, same-size output.
inline std::vector<double> filter_separable(const std::vector<double>& in, int h, int w, const std::vector<double>& taps) {
  const int half = static_cast<int>(taps.size()) / 2;
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -half; k <= half; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < w) s += taps[k + half] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = -half; k <= half; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < h) s += taps[k + half] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  return out;
}

}  // namespace detail

/// Weighted F-measure with beta^2 = 1: errors are spread by a 7x7 Gaussian
/// (sigma 5) within the object and weighted by distance from it outside.
/// Empty gt scores 1 when prob is identically 0, else 0.
inline double weighted_fbeta(const ProbabilityMap& prob, const BinaryMask& gt, double beta2 = 1.0) {
  require_same_grid(prob, gt, "weighted_fbeta");
  check_probability(prob, "weighted_fbeta");
  const std::size_t n = gt.size();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) positives += gt[i] != 0;
  if (positives == 0) {
    return std::all_of(prob.values.begin(), prob.values.end(), [](double v) { return v == 0.0; }) ? 1.0 : 0.0;
  }

  std::vector<double> err(n);
  for (std::size_t i = 0; i < n; ++i) err[i] = std::abs(prob[i] - (gt[i] ? 1.0 : 0.0));
  std::vector<std::int64_t> dist2;
  std::vector<std::size_t> nearest;
  detail::nearest_foreground(gt, dist2, nearest);

  std::vector<double> et(n);
  for (std::size_t i = 0; i < n; ++i) et[i] = gt[i] ? err[i] : err[nearest[i]];
  const std::vector<double> ea = detail::filter_separable(et, gt.height, gt.width, detail::gaussian_taps(7, 5.0));

  double err_in = 0, err_out = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i]) {
      err_in += std::min(err[i], ea[i]);
    } else {
      const double b = 2.0 - std::exp(std::log(0.5) / 5.0 * std::sqrt(static_cast<double>(dist2[i])));
      err_out += err[i] * b;
    }
  }
  const double tpw = static_cast<double>(positives) - err_in;
  const double recall = 1.0 - err_in / static_cast<double>(positives);
  const double precision = tpw / (kMetricEps + tpw + err_out);
  const double q = (1 + beta2) * recall * precision / (kMetricEps + recall + beta2 * precision);
  return std::clamp(q, 0.0, 1.0);
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double object_score(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const double x = mean_of(values);
  return 2.0 * x / (x * x + 1.0 + sample_std(values) + kMetricEps);
}

/// SSIM-style similarity between a prediction block and a gt block.
inline double block_ssim(const std::vector<double>& p, const std::vector<double>& g) {
  const double n = static_cast<double>(p.size());
  const double x = mean_of(p), y = mean_of(g);
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sxx += (p[i] - x) * (p[i] - x);
    syy += (g[i] - y) * (g[i] - y);
    sxy += (p[i] - x) * (g[i] - y);
  }
  sxx /= n - 1 + kMetricEps;
  syy /= n - 1 + kMetricEps;
  sxy /= n - 1 + kMetricEps;
  const double alpha = 4 * x * y * sxy;
  const double beta = (x * x + y * y) * (sxx + syy);
  if (alpha != 0) return alpha / (beta + kMetricEps);
  return beta == 0 ? 1.0 : 0.0;
}

}  // namespace detail

/// Structure measure alpha*S_o + (1-alpha)*S_r, clamped to [0,1].
inline double s_measure(const ProbabilityMap& prob, const BinaryMask& gt, double alpha = 0.5) {
  require_same_grid(prob, gt, "s_measure");
  check_probability(prob, "s_measure");
  if (!(alpha >= 0 && alpha <= 1)) throw InputError("s_measure: alpha must lie in [0,1]");
  const int h = gt.height, w = gt.width;
  const std::size_t n = gt.size();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) positives += gt[i] != 0;
  const double mean_prob = detail::mean_of(prob.values);
  if (positives == 0) return 1.0 - mean_prob;
  if (positives == n) return mean_prob;

  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i]) fg.push_back(prob[i]);
    else bg.push_back(1.0 - prob[i]);
  }
  const double u = static_cast<double>(positives) / static_cast<double>(n);
  const double s_object = u * detail::object_score(fg) + (1 - u) * detail::object_score(bg);

  // Centroid in 1-based coordinates; quadrant split after column cx, row cy.
  double sx = 0, sy = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (gt.at(y, x)) {
        sx += x + 1;
        sy += y + 1;
      }
  const int cx = static_cast<int>(std::round(sx / static_cast<double>(positives)));
  const int cy = static_cast<int>(std::round(sy / static_cast<double>(positives)));
  const std::array<std::array<int, 4>, 4> blocks{{{0, cy, 0, cx}, {0, cy, cx, w}, {cy, h, 0, cx}, {cy, h, cx, w}}};
  double s_region = 0;
  for (const auto& [y0, y1, x0, x1] : blocks) {
    if (y1 <= y0 || x1 <= x0) continue;
    std::vector<double> p, g;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        p.push_back(prob.at(y, x));
        g.push_back(gt.at(y, x) ? 1.0 : 0.0);
      }
    const double weight = static_cast<double>((y1 - y0) * (x1 - x0)) / static_cast<double>(n);
    s_region += weight * detail::block_ssim(p, g);
  }
  return std::clamp(alpha * s_object + (1 - alpha) * s_region, 0.0, 1.0);
}

/// Enhanced-alignment measure maximised over the thresholds k/K,
/// k = 0..K-1, with foreground = prob >= threshold.
inline double e_measure_max(const ProbabilityMap& prob, const BinaryMask& gt, int thresholds = 256) {
  require_same_grid(prob, gt, "e_measure_max");
  check_probability(prob, "e_measure_max");
  if (thresholds < 1) throw InputError("e_measure_max: thresholds must be >= 1");
  const std::size_t n = gt.size();
  const double nd = static_cast<double>(n);
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) positives += gt[i] != 0;

  // Per threshold the score depends only on how many gt-positive and
  // gt-negative pixels are predicted foreground. Bucket each pixel by the
  // highest threshold index it clears, then sweep thresholds downwards.
  std::vector<std::int64_t> pos_at(static_cast<std::size_t>(thresholds), 0), neg_at(pos_at);
  for (std::size_t i = 0; i < n; ++i) {
    int k = std::min(thresholds - 1, static_cast<int>(std::floor(prob[i] * thresholds)));
    while (k + 1 < thresholds && prob[i] >= static_cast<double>(k + 1) / thresholds) ++k;
    while (k > 0 && prob[i] < static_cast<double>(k) / thresholds) --k;
    (gt[i] ? pos_at : neg_at)[static_cast<std::size_t>(k)]++;
  }

  const double g_mean = static_cast<double>(positives) / nd;
  double best = -1;
  std::int64_t tp = 0, fp = 0;
  for (int k = thresholds - 1; k >= 0; --k) {
    tp += pos_at[static_cast<std::size_t>(k)];
    fp += neg_at[static_cast<std::size_t>(k)];
    const double fg = static_cast<double>(tp + fp);
    double score;
    if (positives == 0) {
      score = 1.0 - fg / nd;
    } else if (positives == n) {
      score = fg / nd;
    } else {
      const double f_mean = fg / nd;
      const std::int64_t fn = static_cast<std::int64_t>(positives) - tp;
      const std::int64_t tn = static_cast<std::int64_t>(n - positives) - fp;
      auto enhanced = [&](double f, double g) {
        const double af = f - f_mean, ag = g - g_mean;
        const double align = 2 * ag * af / (ag * ag + af * af + kMetricEps);
        return (align + 1) * (align + 1) / 4;
      };
      score = (static_cast<double>(tp) * enhanced(1, 1) + static_cast<double>(fp) * enhanced(1, 0) +
               static_cast<double>(fn) * enhanced(0, 1) + static_cast<double>(tn) * enhanced(0, 0)) /
              nd;
    }
    best = std::max(best, score);
  }
  return std::clamp(best, 0.0, 1.0);
}

struct MetricReport {
  double dice = 0, iou = 0, specificity = 0, f_beta_w = 0, s_alpha = 0, e_phi_max = 0, mae = 0;

  static constexpr std::array<const char*, 7> kColumns{"dice", "iou", "specificity", "fbw", "s_alpha", "e_phi_max", "mae"};

  std::array<double, 7> values() const { return {dice, iou, specificity, f_beta_w, s_alpha, e_phi_max, mae}; }
  static MetricReport from_values(const std::array<double, 7>& v) { return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]}; }
  /// Radar axes: the six scores plus 1 - mae.
  std::array<double, 7> radar() const { return {dice, iou, specificity, f_beta_w, s_alpha, e_phi_max, 1.0 - mae}; }
};

inline MetricReport evaluate_all(const ProbabilityMap& prob, const BinaryMask& gt, double threshold = 0.5) {
  require_same_grid(prob, gt, "evaluate_all");
  check_probability(prob, "evaluate_all");
  const BinaryMask pred = binarize(prob, threshold);
  MetricReport r;
  r.dice = dice(pred, gt);
  r.iou = iou(pred, gt);
  r.specificity = specificity(pred, gt);
  r.f_beta_w = weighted_fbeta(prob, gt);
  r.s_alpha = s_measure(prob, gt);
  r.e_phi_max = e_measure_max(prob, gt);
  r.mae = mae(prob, gt);
  return r;
}

inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw InputError("mean_report: no reports");
  std::array<double, 7> s{};
  for (const auto& r : reports) {
    const auto v = r.values();
    for (std::size_t k = 0; k < 7; ++k) s[k] += v[k];
  }
  for (double& v : s) v /= static_cast<double>(reports.size());
  return MetricReport::from_values(s);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string metrics_csv_header() {
  std::string s;
  for (std::size_t k = 0; k < MetricReport::kColumns.size(); ++k) s += (k ? "," : "") + std::string(MetricReport::kColumns[k]);
  return s + "\n";
}

inline std::string metrics_csv_row(const MetricReport& r) {
  std::string s;
  const auto v = r.values();
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + format_number(v[k]);
  return s + "\n";
}

/// Parses a metrics CSV (header plus rows) written by write_metrics_csv.
inline std::vector<MetricReport> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line + "\n" != metrics_csv_header()) {
    throw InputError("'" + path + "' does not have the metrics header " + metrics_csv_header());
  }
  std::vector<MetricReport> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<double, 7> v{};
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    for (; std::getline(ss, cell, ','); ++k) {
      if (k >= 7) break;
      try {
        std::size_t used = 0;
        v[k] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw InputError("'" + path + "' line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (k != 7) throw InputError("'" + path + "' line " + std::to_string(lineno) + ": expected 7 columns");
    out.push_back(MetricReport::from_values(v));
  }
  if (out.empty()) throw InputError("'" + path + "' has no rows");
  return out;
}

struct BatchEvaluation {
  std::vector<std::string> ids;
  std::vector<MetricReport> per_sample;
  MetricReport mean;
};

/// Pairs <pred_dir>/<id>.png (gray, value/255 as probability) with
/// <gt_dir>/<id>.png (binarized at > 127). Every gt file needs a prediction.
inline BatchEvaluation evaluate_directories(const std::string& pred_dir, const std::string& gt_dir, double threshold = 0.5) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir)) throw InputError("missing ground-truth directory '" + gt_dir + "'");
  if (!fs::is_directory(pred_dir)) throw InputError("missing prediction directory '" + pred_dir + "'");
  const auto gt_files = detail::list_png(gt_dir);
  if (gt_files.empty()) throw InputError("no .png masks in '" + gt_dir + "'");
  BatchEvaluation out;
  for (const auto& gf : gt_files) {
    const fs::path pf = fs::path(pred_dir) / gf.filename();
    if (!fs::exists(pf)) throw InputError("no prediction for '" + gf.filename().string() + "' in '" + pred_dir + "'");
    const BinaryMask gt = mask_from_raster(read_png(gf.string(), 1));
    const Raster8 pr = read_png(pf.string(), 1);
    if (pr.height != gt.height || pr.width != gt.width) {
      throw InputError("prediction '" + pf.string() + "' size differs from its ground truth");
    }
    ProbabilityMap prob(pr.height, pr.width);
    for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = pr.pixels[i] / 255.0;
    out.ids.push_back(gf.stem().string());
    out.per_sample.push_back(evaluate_all(prob, gt, threshold));
  }
  out.mean = mean_report(out.per_sample);
  return out;
}

/// Writes per_sample.csv, mean.csv (both with exactly the seven metric
/// columns) and ids.txt (row order of per_sample.csv).
inline void write_evaluation(const BatchEvaluation& e, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw InputError("cannot create '" + out_dir + "': " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
    if (!f) throw InputError("cannot write '" + (fs::path(out_dir) / name).string() + "'");
    return f;
  };
  auto per = open("per_sample.csv");
  per << metrics_csv_header();
  for (const auto& r : e.per_sample) per << metrics_csv_row(r);
  auto mean = open("mean.csv");
  mean << metrics_csv_header() << metrics_csv_row(e.mean);
  auto ids = open("ids.txt");
  for (const auto& id : e.ids) ids << id << '\n';
}

}  // namespace stylseg
