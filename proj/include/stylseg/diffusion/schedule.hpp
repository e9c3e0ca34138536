#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/error.hpp"

namespace stylseg {

/// Cumulative signal coefficients alpha_bar[0..T] of a diffusion process.
///
/// Invariants hold from construction on: alpha_bar[0] in (1 - 1e-4, 1],
/// alpha_bar strictly decreasing, alpha_bar[T] > 0. Since the table cannot be
/// mutated afterwards, every stepping routine can rely on them.
class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(linear_beta(100)) {}

  explicit NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
    validate(/*allow_flat=*/false);
  }

  /// Linear beta ramp, alpha_bar[t] = prod_{i<=t} (1 - beta_i), alpha_bar[0] = 1.
  static NoiseSchedule linear_beta(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw InputError("noise schedule needs at least one step");
    if (!(beta_start > 0 && beta_end >= beta_start && beta_end < 1)) {
      throw InputError("noise schedule betas must satisfy 0 < start <= end < 1");
    }
    std::vector<double> ab(steps + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
      const double beta = steps == 1 ? beta_start
                                     : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
      ab[t] = ab[t - 1] * (1.0 - beta);
    }
    NoiseSchedule s(std::move(ab));
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    return s;
  }

  /// Like the main constructor but permits equal neighbours. Only meant for
  /// exercising degenerate cases in tests.
  static NoiseSchedule with_flat_segments(std::vector<double> alpha_bar) {
    NoiseSchedule s;
    s.alpha_bar_ = std::move(alpha_bar);
    s.validate(/*allow_flat=*/true);
    return s;
  }

  int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const {
    if (t < 0 || t > steps()) {
      throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    }
    return alpha_bar_[static_cast<std::size_t>(t)];
  }
  const std::vector<double>& table() const { return alpha_bar_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  nlohmann::json to_json() const {
    return {{"steps", steps()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}, {"alpha_bar", alpha_bar_}};
  }
  static NoiseSchedule from_json(const nlohmann::json& j) {
    NoiseSchedule s(j.at("alpha_bar").get<std::vector<double>>());
    s.beta_start_ = j.value("beta_start", 0.0);
    s.beta_end_ = j.value("beta_end", 0.0);
    return s;
  }

 private:
  void validate(bool allow_flat) const {
    if (alpha_bar_.size() < 2) throw InputError("noise schedule needs T >= 1");
    if (!(alpha_bar_[0] > 1.0 - 1e-4 && alpha_bar_[0] <= 1.0)) {
      throw InputError("alpha_bar[0] must lie in (1 - 1e-4, 1]");
    }
    for (std::size_t t = 0; t + 1 < alpha_bar_.size(); ++t) {
      const bool ok = allow_flat ? alpha_bar_[t + 1] <= alpha_bar_[t] : alpha_bar_[t + 1] < alpha_bar_[t];
      if (!ok) throw InputError("alpha_bar must be strictly decreasing (violated at t=" + std::to_string(t + 1) + ")");
    }
    if (!(alpha_bar_.back() > 0.0)) throw InputError("alpha_bar[T] must be positive");
  }

  std::vector<double> alpha_bar_;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
};

}  // namespace stylseg
