#pragma once

// Desk-scale networks for the diffusion autoencoder: a residual conv
// denoiser with sinusoidal time embedding and additive code conditioning,
// and a conv encoder with global pooling.

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/diffusion/ddim.hpp"
#include "stylseg/nn.hpp"

namespace stylseg {

/// Maps images [N,C,H,W] to semantic codes [N,d].
template <typename T>
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Var<T> encode(const Var<T>& images) const = 0;
  virtual int code_dim() const = 0;
  virtual ParamList<T> parameters() const { return {}; }
};

struct DenoiserConfig {
  int channels = 3;
  int width = 16;
  int time_dim = 32;
  int code_dim = 64;  // 0 disables conditioning
  int blocks = 1;     // residual blocks per resolution level
  bool zero_init_output = true;
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"channels", c.channels}, {"width", c.width}, {"time_dim", c.time_dim},
       {"code_dim", c.code_dim}, {"blocks", c.blocks}, {"zero_init_output", c.zero_init_output}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("width").get_to(c.width);
  j.at("time_dim").get_to(c.time_dim);
  j.at("code_dim").get_to(c.code_dim);
  j.at("blocks").get_to(c.blocks);
  j.at("zero_init_output").get_to(c.zero_init_output);
}

struct EncoderConfig {
  int channels = 3;
  int width = 16;
  int code_dim = 64;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels}, {"width", c.width}, {"code_dim", c.code_dim}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("width").get_to(c.width);
  j.at("code_dim").get_to(c.code_dim);
}

/// Transformer-style sinusoidal embedding, [N, dim].
template <typename T>
Tensor<T> timestep_embedding(std::span<const int> t, int n, int dim) {
  Tensor<T> out({n, dim});
  const int half = dim / 2;
  for (int i = 0; i < n; ++i) {
    const double ti = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(i)];
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(half, 1));
      out[i * dim + k] = static_cast<T>(std::sin(ti * freq));
      out[i * dim + half + k] = static_cast<T>(std::cos(ti * freq));
    }
  }
  return out;
}

template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(int channels, int emb_dim, Rng& rng)
      : conv1_(channels, channels, 3, rng), emb_(emb_dim, channels, rng), conv2_(channels, channels, 3, rng) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = conv1_(silu(x));
    h = add_channel_bias(h, emb_(emb));
    h = conv2_(silu(h));
    return add(x, h);
  }

  ParamList<T> parameters() const {
    ParamList<T> p;
    append(p, conv1_.parameters(), "conv1.");
    append(p, emb_.parameters(), "emb.");
    append(p, conv2_.parameters(), "conv2.");
    return p;
  }

 private:
  Conv2d<T> conv1_;
  Dense<T> emb_;
  Conv2d<T> conv2_;
};

/// Two-level residual denoiser with a skip connection.
template <typename T>
class ConvDenoiser final : public Denoiser<T> {
 public:
  ConvDenoiser(DenoiserConfig config, Rng& rng) : config_(config) {
    if (config.width < 1 || config.time_dim < 2 || config.blocks < 1 || config.code_dim < 0) {
      throw InputError("invalid denoiser configuration");
    }
    const int c = config.width, e = config.time_dim;
    time1_ = Dense<T>(e, e, rng);
    time2_ = Dense<T>(e, e, rng);
    if (config.code_dim > 0) code_proj_ = Dense<T>(config.code_dim, e, rng);
    conv_in_ = Conv2d<T>(config.channels, c, 3, rng);
    conv_down_ = Conv2d<T>(c, 2 * c, 3, rng);
    conv_up_ = Conv2d<T>(3 * c, c, 3, rng);
    conv_out_ = Conv2d<T>(c, config.channels, 3, rng, config.zero_init_output);
    for (int i = 0; i < config.blocks; ++i) {
      high_in_.emplace_back(c, e, rng);
      low_.emplace_back(2 * c, e, rng);
      high_out_.emplace_back(c, e, rng);
    }
  }

  using Denoiser<T>::predict_noise;
  Var<T> predict_noise(const Var<T>& x, std::span<const int> t, const Var<T>& code) const override {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != config_.channels || s[2] % 2 || s[3] % 2) {
      throw InputError("denoiser input must be [N," + std::to_string(config_.channels) +
                       ",H,W] with even H and W, got " + shape_str(s));
    }
    const int n = s[0];
    if (t.size() != 1 && t.size() != static_cast<std::size_t>(n)) throw InputError("denoiser: timestep count mismatch");
    Var<T> emb = time2_(silu(time1_(Var<T>::constant(timestep_embedding<T>(t, n, config_.time_dim)))));
    if (code.defined() && config_.code_dim > 0) {
      if (code.shape() != Shape{n, config_.code_dim}) {
        throw InputError("denoiser: code shape " + shape_str(code.shape()) + ", expected [" +
                         std::to_string(n) + "," + std::to_string(config_.code_dim) + "]");
      }
      emb = add(emb, code_proj_(code));
    }
    emb = silu(emb);

    Var<T> high = conv_in_(x);
    for (const auto& b : high_in_) high = b(high, emb);
    Var<T> low = conv_down_(avg_pool2(high));
    for (const auto& b : low_) low = b(low, emb);
    Var<T> up = conv_up_(concat_channels(upsample2(low), high));
    for (const auto& b : high_out_) up = b(up, emb);
    return conv_out_(silu(up));
  }

  ParamList<T> parameters() const override {
    ParamList<T> p;
    append(p, time1_.parameters(), "time1.");
    append(p, time2_.parameters(), "time2.");
    if (config_.code_dim > 0) append(p, code_proj_.parameters(), "code_proj.");
    append(p, conv_in_.parameters(), "conv_in.");
    append(p, conv_down_.parameters(), "conv_down.");
    append(p, conv_up_.parameters(), "conv_up.");
    append(p, conv_out_.parameters(), "conv_out.");
    for (std::size_t i = 0; i < high_in_.size(); ++i) {
      append(p, high_in_[i].parameters(), "high_in." + std::to_string(i) + ".");
      append(p, low_[i].parameters(), "low." + std::to_string(i) + ".");
      append(p, high_out_[i].parameters(), "high_out." + std::to_string(i) + ".");
    }
    return p;
  }

  /// Deep copy with independent parameters.
  std::shared_ptr<Denoiser<T>> clone() const override {
    Rng rng(0);
    auto copy = std::make_shared<ConvDenoiser>(config_, rng);
    auto dst = copy->parameters();
    const auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].var.mutable_value() = src[i].var.value();
      dst[i].var.set_requires_grad(src[i].var.requires_grad());
    }
    return copy;
  }

  const DenoiserConfig& config() const { return config_; }

 private:
  DenoiserConfig config_;
  Dense<T> time1_, time2_, code_proj_;
  Conv2d<T> conv_in_, conv_down_, conv_up_, conv_out_;
  std::vector<ResBlock<T>> high_in_, low_, high_out_;
};

/// Three-stage conv encoder with global average pooling.
template <typename T>
class ConvEncoder final : public Encoder<T> {
 public:
  ConvEncoder(EncoderConfig config, Rng& rng) : config_(config) {
    if (config.width < 1 || config.code_dim < 1) throw InputError("invalid encoder configuration");
    const int c = config.width;
    conv1_ = Conv2d<T>(config.channels, c, 3, rng);
    conv2_ = Conv2d<T>(c, 2 * c, 3, rng);
    conv3_ = Conv2d<T>(2 * c, 4 * c, 3, rng);
    head_ = Dense<T>(4 * c, config.code_dim, rng);
  }

  Var<T> encode(const Var<T>& images) const override {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != config_.channels || s[2] % 4 || s[3] % 4) {
      throw InputError("encoder input must be [N," + std::to_string(config_.channels) +
                       ",H,W] with H and W divisible by 4, got " + shape_str(s));
    }
    Var<T> h = silu(conv1_(images));
    h = silu(conv2_(avg_pool2(h)));
    h = silu(conv3_(avg_pool2(h)));
    return head_(global_avg_pool(h));
  }

  int code_dim() const override { return config_.code_dim; }

  ParamList<T> parameters() const override {
    ParamList<T> p;
    append(p, conv1_.parameters(), "conv1.");
    append(p, conv2_.parameters(), "conv2.");
    append(p, conv3_.parameters(), "conv3.");
    append(p, head_.parameters(), "head.");
    return p;
  }

  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  Conv2d<T> conv1_, conv2_, conv3_;
  Dense<T> head_;
};

}  // namespace stylseg
