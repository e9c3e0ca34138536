#pragma once

// Structure-preserving network: a 1x1 convolution of the clean input whose
// output is added to the latent before each reverse step inside a window.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/autograd.hpp"
#include "stylseg/diffusion/ddim.hpp"
#include "stylseg/nn.hpp"

namespace stylseg {

template <typename T>
struct SPNParams {
  Var<T> weight;  // [C_out, C_in]
  Var<T> bias;    // [C_out]
  int t_lo = 1;   // injection window over reverse-step timesteps, inclusive
  int t_hi = 1;

  int channels() const { return weight.shape()[0]; }
  bool in_window(int t) const { return t >= t_lo && t <= t_hi; }

  ParamList<T> parameters() const { return {{"weight", weight}, {"bias", bias}}; }

  void validate(int steps) const {
    if (weight.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != weight.shape()[0]) {
      throw InputError("SPN weight must be [C_out,C_in] and bias [C_out]");
    }
    if (!(1 <= t_lo && t_lo <= t_hi && t_hi <= steps)) {
      throw InputError("SPN injection window [" + std::to_string(t_lo) + "," + std::to_string(t_hi) +
                       "] must satisfy 1 <= lo <= hi <= " + std::to_string(steps));
    }
    if (!weight.value().all_finite() || !bias.value().all_finite()) throw NumericError("SPN parameters are not finite");
  }
};

/// Zero-initialised SPN with the window covering [t_lo, t_hi]. Parameters
/// are trainable leaves.
template <typename T>
SPNParams<T> zero_spn(int channels, int t_lo, int t_hi) {
  SPNParams<T> p{Var<T>::parameter(Tensor<T>({channels, channels})), Var<T>::parameter(Tensor<T>({channels})), t_lo,
                 t_hi};
  return p;
}

/// Correction = per-pixel linear map of an [N,C,H,W] image.
template <typename T>
Var<T> spn_apply(const Var<T>& image, const SPNParams<T>& params) {
  const Shape& s = image.shape();
  const Shape& ws = params.weight.shape();
  if (s.size() != 4) throw InputError("spn_apply: expected [N,C,H,W], got " + shape_str(s));
  if (ws.size() != 2 || ws[1] != s[1]) {
    throw InputError("spn_apply: image has " + std::to_string(s[1]) + " channels, SPN expects " +
                     (ws.size() == 2 ? std::to_string(ws[1]) : std::string("?")));
  }
  return conv2d(image, reshape(params.weight, {ws[0], ws[1], 1, 1}), params.bias);
}

template <typename T>
Tensor<T> spn_apply(const Tensor<T>& image, const SPNParams<T>& params) {
  return spn_apply(Var<T>::constant(image), params).value();
}

/// x' = x + correction when t lies in the window; otherwise the state is
/// returned as is.
template <typename T>
LatentState<T> inject(const LatentState<T>& state, const Var<T>& correction, int t, const SPNParams<T>& params) {
  require_same_shape(state.x.shape(), correction.shape(), "inject");
  if (!params.in_window(t)) return state;
  return {add(state.x, correction), state.t};
}

/// Mean over targets of ||spn_apply(reference) - target||_2.
template <typename T>
Var<T> spn_loss(const SPNParams<T>& params, const Var<T>& reference_image, const std::vector<Var<T>>& target_latents) {
  if (target_latents.empty()) throw InputError("spn_loss: empty target list");
  const Var<T> out = spn_apply(reference_image, params);
  Var<T> total;
  for (const auto& target : target_latents) {
    require_same_shape(out.shape(), target.shape(), "spn_loss");
    const Var<T> d = l2_distance(out, target);
    total = total.defined() ? add(total, d) : d;
  }
  return scale(total, T(1) / static_cast<T>(target_latents.size()));
}

template <typename T>
nlohmann::json spn_to_json(const SPNParams<T>& p) {
  return {{"weight", tensor_to_json(p.weight.value())},
          {"bias", tensor_to_json(p.bias.value())},
          {"window", {p.t_lo, p.t_hi}}};
}

template <typename T>
SPNParams<T> spn_from_json(const nlohmann::json& j) {
  const auto w = j.at("window").get<std::vector<int>>();
  if (w.size() != 2) throw InputError("SPN window must have two entries");
  return {Var<T>::constant(tensor_from_json<T>(j.at("weight"))), Var<T>::constant(tensor_from_json<T>(j.at("bias"))),
          w[0], w[1]};
}

}  // namespace stylseg
