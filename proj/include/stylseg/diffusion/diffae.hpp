#pragma once

// Diffusion autoencoder: semantic encoder + conditioned denoiser + schedule.
//
// All routines here work in model space, where image intensities in [0,1]
// are mapped affinely to [-1,1]. Callers holding [0,1] images convert at the
// boundary with to_model_space / from_model_space.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/diffusion/ddim.hpp"
#include "stylseg/diffusion/networks.hpp"
#include "stylseg/diffusion/schedule.hpp"

namespace stylseg {

struct ImageShape {
  int channels = 3;
  int height = 64;
  int width = 64;

  Shape batched(int n = 1) const { return {n, channels, height, width}; }
  Shape unbatched() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

template <typename T>
Tensor<T> to_model_space(const Tensor<T>& image) {
  Tensor<T> out = image;
  for (auto& v : out.storage()) v = T(2) * v - T(1);
  return out;
}

template <typename T>
Tensor<T> from_model_space(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.storage()) v = (v + T(1)) / T(2);
  return out;
}

/// Stacks [C,H,W] images (selected by index) into a [N,C,H,W] batch.
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<T>>& images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("stack_images: empty selection");
  const Shape& s = images.at(indices[0]).shape();
  Tensor<T> out({static_cast<int>(indices.size()), s.at(0), s.at(1), s.at(2)});
  const std::size_t per = images[indices[0]].size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor<T>& img = images.at(indices[i]);
    require_same_shape(img.shape(), s, "stack_images");
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

template <typename T>
Tensor<T> batch_of_one(const Tensor<T>& image) {
  const Shape& s = image.shape();
  if (s.size() == 4) return image;
  if (s.size() != 3) throw InputError("expected an image shaped [C,H,W], got " + shape_str(s));
  return image.reshaped({1, s[0], s[1], s[2]});
}

template <typename T>
struct DiffAEModel {
  NoiseSchedule schedule;
  ImageShape shape;
  std::shared_ptr<Encoder<T>> encoder;
  std::shared_ptr<Denoiser<T>> denoiser;

  int code_dim() const { return encoder->code_dim(); }

  ParamList<T> parameters() const {
    ParamList<T> p;
    append(p, encoder->parameters(), "encoder.");
    append(p, denoiser->parameters(), "denoiser.");
    return p;
  }
};

/// z_sem = Enc(image). Accepts [C,H,W] or [N,C,H,W] in model space.
template <typename T>
Var<T> encode_semantic(const Var<T>& image, const DiffAEModel<T>& model) {
  const Shape& s = image.shape();
  const Shape expected = model.shape.unbatched();
  const bool ok = s.size() == 4 ? Shape(s.begin() + 1, s.end()) == expected : false;
  if (!ok) {
    throw InputError("encode_semantic: image shape " + shape_str(s) + " does not match model input " +
                     shape_str(expected));
  }
  Var<T> z = model.encoder->encode(image);
  if (!z.value().all_finite()) throw NumericError("semantic encoder produced non-finite code");
  return z;
}

template <typename T>
Tensor<T> encode_semantic(const Tensor<T>& image, const DiffAEModel<T>& model) {
  return encode_semantic(Var<T>::constant(batch_of_one(image)), model).value();
}

/// Full reverse trajectory T -> 0 from `noise`, conditioned on `code`.
template <typename T>
Var<T> generate_conditioned(const Var<T>& code, const Var<T>& noise, const DiffAEModel<T>& model) {
  const Shape& s = noise.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != model.shape.unbatched()) {
    throw InputError("generate_conditioned: noise shape " + shape_str(s) + " does not match model image shape");
  }
  LatentState<T> state{noise, model.schedule.steps()};
  return ddim_decode(state, model.schedule.steps(), *model.denoiser, model.schedule, code).x;
}

template <typename T>
Tensor<T> generate_conditioned(const Tensor<T>& code, const Tensor<T>& noise, const DiffAEModel<T>& model) {
  return generate_conditioned(Var<T>::constant(code), Var<T>::constant(batch_of_one(noise)), model).value();
}

/// Deterministic stochastic encoding x_0 -> x_T under the image's own code.
template <typename T>
Tensor<T> stochastic_encode(const Tensor<T>& image, const Tensor<T>& code, const DiffAEModel<T>& model) {
  LatentState<T> state{Var<T>::constant(batch_of_one(image)), 0};
  return ddim_encode(state, model.schedule.steps(), *model.denoiser, model.schedule, Var<T>::constant(code)).x.value();
}

struct DiffAETrainConfig {
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  DenoiserConfig denoiser;
  EncoderConfig encoder;
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

template <typename T>
struct DiffAETrainResult {
  DiffAEModel<T> model;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
};

/// Builds an untrained model with conv encoder and denoiser.
template <typename T>
DiffAEModel<T> make_diffae(const DiffAETrainConfig& config, ImageShape shape) {
  if (config.encoder.code_dim != config.denoiser.code_dim) {
    throw InputError("encoder code_dim " + std::to_string(config.encoder.code_dim) +
                     " differs from denoiser code_dim " + std::to_string(config.denoiser.code_dim));
  }
  if (config.encoder.channels != shape.channels || config.denoiser.channels != shape.channels) {
    throw InputError("network channel count does not match image channels");
  }
  Rng rng(config.seed);
  DiffAEModel<T> model;
  model.schedule = NoiseSchedule::linear_beta(config.timesteps, config.beta_start, config.beta_end);
  model.shape = shape;
  model.encoder = std::make_shared<ConvEncoder<T>>(config.encoder, rng);
  model.denoiser = std::make_shared<ConvDenoiser<T>>(config.denoiser, rng);
  return model;
}

/// Trains encoder and denoiser jointly on conditioned noise prediction:
/// || eps(sqrt(a_t) x0 + sqrt(1-a_t) n, t, Enc(x0)) - n ||^2 with t uniform
/// in [1, T]. Images are [C,H,W] in [0,1]. The returned model is frozen.
template <typename T>
DiffAETrainResult<T> train_diffae(const std::vector<Tensor<T>>& images, const DiffAETrainConfig& config) {
  if (images.empty()) throw InputError("train_diffae: empty dataset");
  if (config.epochs < 1 || config.batch_size < 1) throw InputError("train_diffae: epochs and batch_size must be >= 1");
  const Shape& s0 = images[0].shape();
  if (s0.size() != 3) throw InputError("train_diffae: images must be [C,H,W]");
  std::vector<Tensor<T>> data;
  data.reserve(images.size());
  for (const auto& img : images) {
    require_same_shape(img.shape(), s0, "train_diffae");
    data.push_back(to_model_space(img));
  }

  DiffAETrainResult<T> result;
  result.model = make_diffae<T>(config, ImageShape{s0[0], s0[1], s0[2]});
  const DiffAEModel<T>& model = result.model;
  ParamList<T> params = model.parameters();
  set_trainable(params, true);
  Adam<T> optimizer(params, AdamConfig{config.learning_rate});

  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> pick_t(1, model.schedule.steps());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor<T> x0 = stack_images(data, idx);
      const int n = static_cast<int>(idx.size());
      std::vector<int> ts(n);
      for (auto& t : ts) t = pick_t(rng);
      const Tensor<T> noise = normal_tensor<T>(x0.shape(), rng);
      Tensor<T> xt(x0.shape());
      const std::size_t per = x0.size() / n;
      for (int i = 0; i < n; ++i) {
        const double a = model.schedule.alpha_bar(ts[i]);
        const T sa = static_cast<T>(std::sqrt(a)), sn = static_cast<T>(std::sqrt(1.0 - a));
        for (std::size_t k = i * per; k < (i + 1) * per; ++k) xt[k] = sa * x0[k] + sn * noise[k];
      }
      const Var<T> code = model.encoder->encode(Var<T>::constant(x0));
      const Var<T> eps = model.denoiser->predict_noise(Var<T>::constant(xt), std::span<const int>(ts), code);
      const Var<T> loss = mse(eps, Var<T>::constant(noise));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("train_diffae: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(result.step_losses.size()));
      }
      loss.backward();
      optimizer.step();
      result.step_losses.push_back(lv);
      epoch_sum += lv;
      ++epoch_steps;
    }
    result.epoch_losses.push_back(epoch_sum / epoch_steps);
  }
  set_trainable(params, false);
  return result;
}

inline constexpr const char* kDiffAEFormat = "stylseg.diffae";
inline constexpr int kDiffAEVersion = 1;

template <typename T>
nlohmann::json diffae_to_json(const DiffAEModel<T>& model) {
  const auto* enc = dynamic_cast<const ConvEncoder<T>*>(model.encoder.get());
  const auto* den = dynamic_cast<const ConvDenoiser<T>*>(model.denoiser.get());
  if (!enc || !den) throw InputError("only conv encoder/denoiser models can be serialized");
  return {{"format", kDiffAEFormat},
          {"version", kDiffAEVersion},
          {"schedule", model.schedule.to_json()},
          {"image_shape", {model.shape.channels, model.shape.height, model.shape.width}},
          {"code_dim", model.code_dim()},
          {"encoder", {{"config", enc->config()}, {"params", params_to_json(enc->parameters())}}},
          {"denoiser", {{"config", den->config()}, {"params", params_to_json(den->parameters())}}}};
}

template <typename T>
DiffAEModel<T> diffae_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kDiffAEFormat) throw InputError("not a diffusion autoencoder checkpoint");
  if (j.value("version", 0) != kDiffAEVersion) throw InputError("unsupported diffusion autoencoder checkpoint version");
  DiffAEModel<T> model;
  model.schedule = NoiseSchedule::from_json(j.at("schedule"));
  const auto dims = j.at("image_shape").get<std::vector<int>>();
  if (dims.size() != 3) throw InputError("checkpoint image_shape must have 3 entries");
  model.shape = ImageShape{dims[0], dims[1], dims[2]};
  Rng rng(0);
  auto enc = std::make_shared<ConvEncoder<T>>(j.at("encoder").at("config").get<EncoderConfig>(), rng);
  auto den = std::make_shared<ConvDenoiser<T>>(j.at("denoiser").at("config").get<DenoiserConfig>(), rng);
  auto ep = enc->parameters();
  params_from_json(ep, j.at("encoder").at("params"));
  auto dp = den->parameters();
  params_from_json(dp, j.at("denoiser").at("params"));
  set_trainable(ep, false);
  set_trainable(dp, false);
  model.encoder = enc;
  model.denoiser = den;
  if (enc->code_dim() != den->config().code_dim) throw InputError("checkpoint encoder/denoiser code_dim mismatch");
  return model;
}

/// Content hash of a model's serialized form; used to reference a source
/// model from other checkpoints.
template <typename T>
std::string diffae_content_hash(const DiffAEModel<T>& model) {
  const std::string s = diffae_to_json(model).dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw InputError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

template <typename T>
void save_diffae(const DiffAEModel<T>& model, const std::string& path) {
  write_text_file(path, diffae_to_json(model).dump());
}

template <typename T>
DiffAEModel<T> load_diffae(const std::string& path) {
  return diffae_from_json<T>(read_json_file(path));
}

}  // namespace stylseg
