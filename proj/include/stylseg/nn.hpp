#pragma once

// Layers, parameter bookkeeping, Adam, and parameter (de)serialization.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/autograd.hpp"

namespace stylseg {

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void set_trainable(const ParamList<T>& params, bool on) {
  for (auto p : params) p.var.set_requires_grad(on);
}

template <typename T>
void append(ParamList<T>& into, const ParamList<T>& from, const std::string& prefix) {
  for (const auto& p : from) into.push_back({prefix + p.name, p.var});
}

/// Same-padded stride-1 convolution layer. He-uniform init unless zeroed.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, Rng& rng, bool zero_init = false) {
    const double bound = std::sqrt(6.0 / (in_channels * kernel * kernel));
    Shape ws{out_channels, in_channels, kernel, kernel};
    weight_ = Var<T>::parameter(zero_init ? Tensor<T>(ws) : uniform_tensor<T>(ws, rng, -bound, bound));
    bias_ = Var<T>::parameter(Tensor<T>({out_channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_); }
  ParamList<T> parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }
  int out_channels() const { return weight_.shape()[0]; }

 private:
  Var<T> weight_, bias_;
};

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(int in_features, int out_features, Rng& rng, bool zero_init = false) {
    const double bound = std::sqrt(3.0 / in_features);
    Shape ws{out_features, in_features};
    weight_ = Var<T>::parameter(zero_init ? Tensor<T>(ws) : uniform_tensor<T>(ws, rng, -bound, bound));
    bias_ = Var<T>::parameter(Tensor<T>({out_features}));
  }
  Var<T> operator()(const Var<T>& x) const { return linear(x, weight_, bias_); }
  ParamList<T> parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }

 private:
  Var<T> weight_, bias_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.value().size(), 0.0);
      v_.emplace_back(p.var.value().size(), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, t_);
    const double c2 = 1.0 - std::pow(config_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>& var = params_[i].var;
      if (!var.has_grad()) continue;
      const Tensor<T> g = var.grad();
      Tensor<T>& w = var.mutable_value();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        m_[i][k] = config_.beta1 * m_[i][k] + (1.0 - config_.beta1) * gk;
        v_[i][k] = config_.beta2 * v_[i][k] + (1.0 - config_.beta2) * gk * gk;
        const double update = config_.learning_rate * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + config_.epsilon);
        w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
      }
      var.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  ParamList<T> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

template <typename T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
  return {{"shape", t.shape()}, {"data", t.storage()}};
}

template <typename T>
Tensor<T> tensor_from_json(const nlohmann::json& j) {
  return Tensor<T>(j.at("shape").get<Shape>(), j.at("data").get<std::vector<T>>());
}

template <typename T>
nlohmann::json params_to_json(const ParamList<T>& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& p : params) j[p.name] = tensor_to_json(p.var.value());
  return j;
}

/// Overwrites parameter values by name; every parameter must be present with
/// a matching shape.
template <typename T>
void params_from_json(ParamList<T>& params, const nlohmann::json& j) {
  for (auto& p : params) {
    if (!j.contains(p.name)) throw InputError("checkpoint is missing parameter '" + p.name + "'");
    Tensor<T> t = tensor_from_json<T>(j.at(p.name));
    if (t.shape() != p.var.shape()) {
      throw InputError("checkpoint parameter '" + p.name + "' has shape " + shape_str(t.shape()) +
                       ", expected " + shape_str(p.var.shape()));
    }
    p.var.mutable_value() = std::move(t);
  }
}

template <typename T>
bool all_params_finite(const ParamList<T>& params) {
  for (const auto& p : params) {
    if (!p.var.value().all_finite()) return false;
  }
  return true;
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

/// FNV-1a 64-bit over a byte range.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace stylseg
