#pragma once

// Image embedding backends for the directional style loss.

#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/diffusion/diffae.hpp"

namespace stylseg {

/// embed(images) -> [N,e] rows of unit L2 norm. Images are [N,C,H,W] in
/// model space. Must be deterministic and differentiable in its input.
template <typename T>
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual Var<T> embed(const Var<T>& images) const = 0;
  virtual int dim() const = 0;
};

struct EmbedderTrainConfig {
  EncoderConfig encoder{3, 16, 32};
  int steps = 300;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double temperature = 0.2;
  double noise = 0.02;  // augmentation noise, model-space units
  std::uint64_t seed = 0;
};

/// Conv encoder followed by row normalisation.
template <typename T>
class ConvEmbedder final : public EmbeddingBackend<T> {
 public:
  ConvEmbedder(EncoderConfig config, Rng& rng) : encoder_(config, rng) {}

  Var<T> embed(const Var<T>& images) const override { return normalize_rows(encoder_.encode(images)); }
  int dim() const override { return encoder_.code_dim(); }
  ParamList<T> parameters() const { return encoder_.parameters(); }
  const EncoderConfig& config() const { return encoder_.config(); }

 private:
  ConvEncoder<T> encoder_;
};

inline constexpr const char* kEmbedderFormat = "stylseg.embedder";
inline constexpr int kEmbedderVersion = 1;

template <typename T>
nlohmann::json embedder_to_json(const ConvEmbedder<T>& e) {
  return {{"format", kEmbedderFormat},
          {"version", kEmbedderVersion},
          {"config", e.config()},
          {"params", params_to_json(e.parameters())}};
}

template <typename T>
std::shared_ptr<ConvEmbedder<T>> embedder_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kEmbedderFormat) throw InputError("not an embedder checkpoint");
  if (j.value("version", 0) != kEmbedderVersion) throw InputError("unsupported embedder checkpoint version");
  Rng rng(0);
  auto e = std::make_shared<ConvEmbedder<T>>(j.at("config").get<EncoderConfig>(), rng);
  auto p = e->parameters();
  params_from_json(p, j.at("params"));
  set_trainable(p, false);
  return e;
}

/// Random dihedral transform (flips, transpose) plus Gaussian noise. Colour
/// statistics are left intact, so instance discrimination has to rely on
/// appearance rather than layout.
template <typename T>
Tensor<T> augment_view(const Tensor<T>& image, Rng& rng, double noise) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::uniform_int_distribution<int> pick(0, 7);
  const int code = h == w ? pick(rng) : pick(rng) & 3;
  const bool fy = code & 1, fx = code & 2, tr = code & 4;
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor<T> out(image.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = fy ? h - 1 - y : y, sx = fx ? w - 1 - x : x;
        if (tr) std::swap(sy, sx);
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            image[(static_cast<std::size_t>(ch) * h + sy) * w + sx] + static_cast<T>(noise * n01(rng));
      }
  return out;
}

template <typename T>
struct EmbedderTrainResult {
  std::shared_ptr<ConvEmbedder<T>> embedder;
  std::vector<double> losses;
};

/// Instance discrimination: two augmented views of each image in a batch
/// must pick each other out under a symmetric InfoNCE loss. Images are
/// [C,H,W] in [0,1]. The returned embedder is frozen.
template <typename T>
EmbedderTrainResult<T> train_embedder(const std::vector<Tensor<T>>& images, const EmbedderTrainConfig& config) {
  if (images.size() < 2) throw InputError("train_embedder: need at least two images");
  if (config.steps < 1 || config.batch_size < 2) throw InputError("train_embedder: steps >= 1 and batch_size >= 2");
  if (!(config.temperature > 0)) throw InputError("train_embedder: temperature must be positive");
  std::vector<Tensor<T>> data;
  for (const auto& img : images) data.push_back(to_model_space(img));

  Rng rng(config.seed);
  EmbedderTrainResult<T> result;
  result.embedder = std::make_shared<ConvEmbedder<T>>(config.encoder, rng);
  ParamList<T> params = result.embedder->parameters();
  set_trainable(params, true);
  Adam<T> opt(params, AdamConfig{config.learning_rate});

  const int b = std::min<int>(config.batch_size, static_cast<int>(data.size()));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<int> targets(static_cast<std::size_t>(b));
  std::iota(targets.begin(), targets.end(), 0);
  const T inv_temp = static_cast<T>(1.0 / config.temperature);

  for (int step = 0; step < config.steps; ++step) {
    std::vector<Tensor<T>> v1, v2;
    for (int i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& img = data[order[cursor++]];
      v1.push_back(augment_view(img, rng, config.noise));
      v2.push_back(augment_view(img, rng, config.noise));
    }
    std::vector<std::size_t> idx(static_cast<std::size_t>(b));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const Var<T> z1 = result.embedder->embed(Var<T>::constant(stack_images(v1, idx)));
    const Var<T> z2 = result.embedder->embed(Var<T>::constant(stack_images(v2, idx)));
    const Var<T> logits12 = scale(linear(z1, z2, Var<T>{}), inv_temp);
    const Var<T> logits21 = scale(linear(z2, z1, Var<T>{}), inv_temp);
    const Var<T> loss =
        scale(add(softmax_cross_entropy(logits12, targets), softmax_cross_entropy(logits21, targets)), T(0.5));
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw NumericError("train_embedder: non-finite loss at step " + std::to_string(step));
    loss.backward();
    opt.step();
    result.losses.push_back(lv);
  }
  set_trainable(params, false);
  return result;
}

}  // namespace stylseg
