#pragma once

// Encoder-decoder segmenter with skip connections, its BCE + soft-Dice loss,
// training, prediction, and the stylize-then-segment pipeline.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/data/image.hpp"
#include "stylseg/diffusion/diffae.hpp"
#include "stylseg/style/style.hpp"

namespace stylseg {

/// predict(images [N,C,H,W] in [0,1]) -> probabilities [N,1,H,W] in [0,1].
template <typename T>
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual Var<T> forward(const Var<T>& images) const = 0;
  virtual ParamList<T> parameters() const = 0;

  ProbabilityMap predict_prob(const Tensor<T>& image) const {
    const Tensor<T> p = forward(Var<T>::constant(batch_of_one(image))).value();
    const int h = p.dim(2), w = p.dim(3);
    ProbabilityMap out(h, w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(p[i]);
    return out;
  }
};

struct UNetConfig {
  int channels = 3;
  int width = 16;
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) { j = {{"channels", c.channels}, {"width", c.width}}; }
inline void from_json(const nlohmann::json& j, UNetConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("width").get_to(c.width);
}

/// Three resolution levels (H, H/2, H/4), two convs per level, sigmoid head.
template <typename T>
class UNet final : public Segmenter<T> {
 public:
  UNet(UNetConfig config, Rng& rng) : config_(config) {
    if (config.channels < 1 || config.width < 1) throw InputError("invalid segmenter configuration");
    const int w = config.width;
    e1a_ = Conv2d<T>(config.channels, w, 3, rng);
    e1b_ = Conv2d<T>(w, w, 3, rng);
    e2a_ = Conv2d<T>(w, 2 * w, 3, rng);
    e2b_ = Conv2d<T>(2 * w, 2 * w, 3, rng);
    ba_ = Conv2d<T>(2 * w, 4 * w, 3, rng);
    bb_ = Conv2d<T>(4 * w, 4 * w, 3, rng);
    d2a_ = Conv2d<T>(6 * w, 2 * w, 3, rng);
    d2b_ = Conv2d<T>(2 * w, 2 * w, 3, rng);
    d1a_ = Conv2d<T>(3 * w, w, 3, rng);
    d1b_ = Conv2d<T>(w, w, 3, rng);
    head_ = Conv2d<T>(w, 1, 1, rng);
  }

  Var<T> forward(const Var<T>& images) const override {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != config_.channels || s[2] % 4 || s[3] % 4) {
      throw InputError("segmenter input must be [N," + std::to_string(config_.channels) +
                       ",H,W] with H and W divisible by 4, got " + shape_str(s));
    }
    Tensor<T> centred = images.value();
    for (auto& v : centred.storage()) v = T(2) * v - T(1);
    const Var<T> x = images.requires_grad() ? axpby(images, T(2), Var<T>::constant(Tensor<T>(s, T(1))), T(-1))
                                            : Var<T>::constant(std::move(centred));
    const Var<T> f1 = silu(e1b_(silu(e1a_(x))));
    const Var<T> f2 = silu(e2b_(silu(e2a_(avg_pool2(f1)))));
    const Var<T> f3 = silu(bb_(silu(ba_(avg_pool2(f2)))));
    const Var<T> u2 = silu(d2b_(silu(d2a_(concat_channels(upsample2(f3), f2)))));
    const Var<T> u1 = silu(d1b_(silu(d1a_(concat_channels(upsample2(u2), f1)))));
    return sigmoid(head_(u1));
  }

  ParamList<T> parameters() const override {
    ParamList<T> p;
    const std::pair<const char*, const Conv2d<T>*> layers[] = {
        {"e1a.", &e1a_}, {"e1b.", &e1b_}, {"e2a.", &e2a_}, {"e2b.", &e2b_}, {"ba.", &ba_},  {"bb.", &bb_},
        {"d2a.", &d2a_}, {"d2b.", &d2b_}, {"d1a.", &d1a_}, {"d1b.", &d1b_}, {"head.", &head_}};
    for (const auto& [name, layer] : layers) append(p, layer->parameters(), name);
    return p;
  }

  const UNetConfig& config() const { return config_; }

 private:
  UNetConfig config_;
  Conv2d<T> e1a_, e1b_, e2a_, e2b_, ba_, bb_, d2a_, d2b_, d1a_, d1b_, head_;
};

inline constexpr double kProbClamp = 1e-7;

/// loss_mix * BCE + (1 - loss_mix) * (1 - soft Dice). pred holds
/// probabilities [N,1,H,W]; gt holds 0/1 of the same shape. Soft Dice is
/// averaged per sample; a sample with empty prediction and empty gt scores 1.
template <typename T>
Var<T> seg_loss(const Var<T>& pred, const Tensor<T>& gt, double loss_mix) {
  require_same_shape(pred.shape(), gt.shape(), "seg_loss");
  if (!(loss_mix >= 0 && loss_mix <= 1)) throw InputError("seg_loss: loss_mix must lie in [0,1]");
  const Tensor<T>& p = pred.value();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= T(0) && p[i] <= T(1))) throw InputError("seg_loss: prediction outside [0,1]");
    if (gt[i] != T(0) && gt[i] != T(1)) throw InputError("seg_loss: ground truth must be binary");
  }
  const int n = pred.shape()[0];
  const std::size_t total = p.size(), per = total / static_cast<std::size_t>(n);

  double bce = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), kProbClamp, 1.0 - kProbClamp);
    bce -= gt[i] > 0 ? std::log(q) : std::log(1.0 - q);
  }
  bce /= static_cast<double>(total);

  std::vector<double> inter(n, 0.0), denom(n, 0.0);
  double dice = 0;
  for (int s = 0; s < n; ++s) {
    for (std::size_t k = s * per; k < (s + 1) * per; ++k) {
      inter[s] += static_cast<double>(p[k]) * gt[k];
      denom[s] += static_cast<double>(p[k]) + gt[k];
    }
    dice += denom[s] > 0 ? 2 * inter[s] / denom[s] : 1.0;
  }
  dice /= n;
  const double value = loss_mix * bce + (1 - loss_mix) * (1 - dice);

  return detail::make_result<T>(
      Tensor<T>({1}, static_cast<T>(value)), {&pred}, [pred, gt, loss_mix, n, per, total, inter, denom](const Tensor<T>& g) {
        const Tensor<T>& pv = pred.value();
        T* gp = pred.node()->grad_buffer().data();
        const double up = static_cast<double>(g[0]);
        for (int s = 0; s < n; ++s) {
          for (std::size_t k = s * per; k < (s + 1) * per; ++k) {
            const double pk = pv[k], gk = gt[k];
            double d = 0;
            if (pk > kProbClamp && pk < 1.0 - kProbClamp) d += loss_mix * (gk > 0 ? -1.0 / pk : 1.0 / (1.0 - pk)) / total;
            if (denom[s] > 0) {
              d -= (1 - loss_mix) / n * (2 * gk * denom[s] - 2 * inter[s]) / (denom[s] * denom[s]);
            }
            gp[k] += static_cast<T>(up * d);
          }
        }
      });
}

struct SegConfig {
  int epochs = 30;
  int batch_size = 12;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double loss_mix = 0.5;
  UNetConfig net;

  void validate() const {
    if (epochs < 1) throw InputError("segmentation epochs must be >= 1");
    if (batch_size < 1) throw InputError("segmentation batch_size must be >= 1");
    if (!(learning_rate > 0)) throw InputError("segmentation learning_rate must be positive");
    if (!(loss_mix >= 0 && loss_mix <= 1)) throw InputError("segmentation loss_mix must lie in [0,1]");
  }
};

template <typename T>
Tensor<T> mask_tensor(const BinaryMask& m) {
  Tensor<T> t({1, m.height, m.width});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i] ? T(1) : T(0);
  return t;
}

template <typename T>
struct SegTrainResult {
  std::shared_ptr<UNet<T>> segmenter;
  std::vector<double> epoch_losses;
};

/// Seeded mini-batch Adam training. Images are [C,H,W] in [0,1].
template <typename T>
SegTrainResult<T> train_segmenter(const std::vector<Tensor<T>>& images, const std::vector<BinaryMask>& masks,
                                  const SegConfig& config) {
  config.validate();
  if (images.empty()) throw InputError("train_segmenter: empty dataset");
  if (images.size() != masks.size()) throw InputError("train_segmenter: image and mask counts differ");
  const Shape s0 = images[0].shape();
  std::vector<Tensor<T>> targets;
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images[i].shape(), s0, "train_segmenter");
    if (masks[i].height != s0.at(1) || masks[i].width != s0.at(2)) {
      throw InputError("train_segmenter: mask " + std::to_string(i) + " does not match its image size");
    }
    targets.push_back(mask_tensor<T>(masks[i]));
  }

  Rng rng(config.seed);
  UNetConfig net = config.net;
  net.channels = s0.at(0);
  SegTrainResult<T> result;
  result.segmenter = std::make_shared<UNet<T>>(net, rng);
  ParamList<T> params = result.segmenter->parameters();
  set_trainable(params, true);
  Adam<T> opt(params, AdamConfig{config.learning_rate});

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Var<T> pred = result.segmenter->forward(Var<T>::constant(stack_images(images, idx)));
      const Var<T> loss = seg_loss(pred, stack_images(targets, idx), config.loss_mix);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("train_segmenter: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      opt.step();
      sum += lv;
      ++steps;
    }
    result.epoch_losses.push_back(sum / steps);
  }
  set_trainable(params, false);
  return result;
}

struct MaskPrediction {
  BinaryMask mask;
  ProbabilityMap prob;
};

inline void check_threshold(double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw InputError("threshold must lie in (0,1)");
}

/// mask = prob > threshold (strict).
inline MaskPrediction threshold_prediction(ProbabilityMap prob, double threshold) {
  check_threshold(threshold);
  BinaryMask mask = binarize(prob, threshold);
  return {std::move(mask), std::move(prob)};
}

template <typename T>
MaskPrediction predict_mask(const Segmenter<T>& segmenter, const Tensor<T>& image, double threshold = 0.5) {
  check_threshold(threshold);
  return threshold_prediction(segmenter.predict_prob(image), threshold);
}

/// Batched prediction over many images.
template <typename T>
std::vector<MaskPrediction> predict_masks(const Segmenter<T>& segmenter, const std::vector<Tensor<T>>& images,
                                          double threshold = 0.5, int batch_size = 16) {
  check_threshold(threshold);
  std::vector<MaskPrediction> out;
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> p = segmenter.forward(Var<T>::constant(stack_images(images, idx))).value();
    const int h = p.dim(2), w = p.dim(3);
    const std::size_t per = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ProbabilityMap prob(h, w);
      for (std::size_t k = 0; k < per; ++k) prob[k] = static_cast<double>(p[i * per + k]);
      out.push_back(threshold_prediction(std::move(prob), threshold));
    }
  }
  return out;
}

template <typename T>
struct PipelineResult {
  std::vector<MaskPrediction> predictions;
  std::vector<double> epoch_losses;
  std::vector<Tensor<T>> training_images;  // stylized when a mapper was given
};

/// Trains on (optionally stylized) training images, then predicts on the
/// untouched test images.
template <typename T>
PipelineResult<T> run_pipeline(const std::vector<Tensor<T>>& train_images, const std::vector<BinaryMask>& labels,
                               const std::vector<Tensor<T>>& test_images, const StyleMapper<T>* mapper,
                               const SegConfig& config, double threshold = 0.5) {
  PipelineResult<T> r;
  r.training_images = mapper ? stylize_batch(train_images, *mapper) : train_images;
  const auto trained = train_segmenter(r.training_images, labels, config);
  r.epoch_losses = trained.epoch_losses;
  r.predictions = predict_masks<T>(*trained.segmenter, test_images, threshold);
  return r;
}

inline constexpr const char* kSegmenterFormat = "stylseg.segmenter";
inline constexpr int kSegmenterVersion = 1;

template <typename T>
nlohmann::json segmenter_to_json(const UNet<T>& net) {
  return {{"format", kSegmenterFormat},
          {"version", kSegmenterVersion},
          {"config", net.config()},
          {"params", params_to_json(net.parameters())}};
}

template <typename T>
std::shared_ptr<UNet<T>> segmenter_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kSegmenterFormat) throw InputError("not a segmenter checkpoint");
  if (j.value("version", 0) != kSegmenterVersion) throw InputError("unsupported segmenter checkpoint version");
  Rng rng(0);
  auto net = std::make_shared<UNet<T>>(j.at("config").get<UNetConfig>(), rng);
  auto p = net->parameters();
  params_from_json(p, j.at("params"));
  set_trainable(p, false);
  return net;
}

}  // namespace stylseg
