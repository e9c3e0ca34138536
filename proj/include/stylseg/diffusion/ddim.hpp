#pragma once

// Deterministic DDIM stepping with optional semantic conditioning.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stylseg/autograd.hpp"
#include "stylseg/diffusion/schedule.hpp"
#include "stylseg/nn.hpp"

namespace stylseg {

/// Noise-prediction network eps(x, t, z). `code` may be undefined, meaning
/// unconditioned. Implementations must be deterministic and pure.
template <typename T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  /// x is [N,C,H,W]; t holds one timestep per sample or a single shared one;
  /// code is [N,d] or undefined.
  virtual Var<T> predict_noise(const Var<T>& x, std::span<const int> t, const Var<T>& code) const = 0;

  Var<T> predict_noise(const Var<T>& x, int t, const Var<T>& code) const {
    const int ts[1] = {t};
    return predict_noise(x, std::span<const int>(ts, 1), code);
  }

  virtual ParamList<T> parameters() const { return {}; }
  virtual std::shared_ptr<Denoiser<T>> clone() const = 0;
};

/// Diffusion state x_t, batched as [N,C,H,W], all samples at timestep t.
template <typename T>
struct LatentState {
  Var<T> x;
  int t = 0;
};

/// x0 estimate (x_t - sqrt(1 - a_t) eps) / sqrt(a_t).
template <typename T>
Var<T> predict_x0(const Var<T>& x_t, int t, const Var<T>& eps, const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.steps()) {
    throw InputError("predict_x0: timestep " + std::to_string(t) + " outside [0, " +
                     std::to_string(schedule.steps()) + "]");
  }
  require_same_shape(x_t.shape(), eps.shape(), "predict_x0");
  const double a = schedule.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(a);
  return axpby(x_t, static_cast<T>(inv), eps, static_cast<T>(-std::sqrt(1.0 - a) * inv));
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  return predict_x0(Var<T>::constant(x_t), t, Var<T>::constant(eps), schedule).value();
}

namespace detail {

template <typename T>
Var<T> checked_noise(const Denoiser<T>& denoiser, const Var<T>& x, int t, const Var<T>& code) {
  Var<T> eps = denoiser.predict_noise(x, t, code);
  if (eps.shape() != x.shape()) {
    throw NumericError("denoiser returned shape " + shape_str(eps.shape()) + " for input " + shape_str(x.shape()));
  }
  if (!eps.value().all_finite()) {
    throw NumericError("denoiser produced non-finite output at t=" + std::to_string(t));
  }
  return eps;
}

// sqrt(a_to) * f(x_t) + sqrt(1 - a_to) * eps
template <typename T>
Var<T> ddim_move(const Var<T>& x, const Var<T>& eps, int t_from, int t_to, const NoiseSchedule& schedule) {
  const Var<T> x0 = predict_x0(x, t_from, eps, schedule);
  const double a = schedule.alpha_bar(t_to);
  return axpby(x0, static_cast<T>(std::sqrt(a)), eps, static_cast<T>(std::sqrt(1.0 - a)));
}

}  // namespace detail

/// One deterministic encoding step t -> t+1. Starting at t = 0 (the clean
/// image) is allowed so that encoding trajectories begin at the data.
template <typename T>
LatentState<T> ddim_forward_step(const LatentState<T>& state, const Denoiser<T>& denoiser,
                                 const NoiseSchedule& schedule, const Var<T>& code = {}) {
  if (state.t < 0 || state.t >= schedule.steps()) {
    throw InputError("ddim_forward_step: cannot step forward from t=" + std::to_string(state.t) +
                     " (T=" + std::to_string(schedule.steps()) + ")");
  }
  const Var<T> eps = detail::checked_noise(denoiser, state.x, state.t, code);
  return {detail::ddim_move(state.x, eps, state.t, state.t + 1, schedule), state.t + 1};
}

/// One deterministic denoising step t -> t-1.
template <typename T>
LatentState<T> ddim_reverse_step(const LatentState<T>& state, const Denoiser<T>& denoiser,
                                 const NoiseSchedule& schedule, const Var<T>& code = {}) {
  if (state.t < 1 || state.t > schedule.steps()) {
    throw InputError("ddim_reverse_step: cannot step back from t=" + std::to_string(state.t) +
                     " (T=" + std::to_string(schedule.steps()) + ")");
  }
  const Var<T> eps = detail::checked_noise(denoiser, state.x, state.t, code);
  return {detail::ddim_move(state.x, eps, state.t, state.t - 1, schedule), state.t - 1};
}

/// Runs `steps` forward steps; optionally records every visited state
/// (excluding the start).
template <typename T>
LatentState<T> ddim_encode(LatentState<T> state, int steps, const Denoiser<T>& denoiser,
                           const NoiseSchedule& schedule, const Var<T>& code = {},
                           std::vector<LatentState<T>>* visited = nullptr) {
  for (int i = 0; i < steps; ++i) {
    state = ddim_forward_step(state, denoiser, schedule, code);
    if (visited) visited->push_back(state);
  }
  return state;
}

template <typename T>
LatentState<T> ddim_decode(LatentState<T> state, int steps, const Denoiser<T>& denoiser,
                           const NoiseSchedule& schedule, const Var<T>& code = {}) {
  for (int i = 0; i < steps; ++i) state = ddim_reverse_step(state, denoiser, schedule, code);
  return state;
}

/// eps(x, t, z) = 0 everywhere.
template <typename T>
class ZeroDenoiser final : public Denoiser<T> {
 public:
  using Denoiser<T>::predict_noise;
  Var<T> predict_noise(const Var<T>& x, std::span<const int>, const Var<T>&) const override {
    return Var<T>::constant(Tensor<T>(x.shape(), T(0)));
  }
  std::shared_ptr<Denoiser<T>> clone() const override { return std::make_shared<ZeroDenoiser>(*this); }
};

/// eps(x, t, z) = c, independent of every input. Forward and reverse DDIM
/// steps are exact inverses under such a denoiser.
template <typename T>
class ConstantDenoiser final : public Denoiser<T> {
 public:
  explicit ConstantDenoiser(Tensor<T> value) : value_(std::move(value)) {}
  using Denoiser<T>::predict_noise;
  Var<T> predict_noise(const Var<T>& x, std::span<const int>, const Var<T>&) const override {
    require_same_shape(value_.shape(), x.shape(), "ConstantDenoiser");
    return Var<T>::constant(value_);
  }
  std::shared_ptr<Denoiser<T>> clone() const override { return std::make_shared<ConstantDenoiser>(*this); }

 private:
  Tensor<T> value_;
};

}  // namespace stylseg
