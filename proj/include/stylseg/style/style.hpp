#pragma once

// One-shot style mapper: source-conditioned DDIM encoding, target-conditioned
// decoding with SPN injection, and the training loop that fits the target
// code and SPN from a single source/target image pair.

#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylseg/diffusion/diffae.hpp"
#include "stylseg/spn.hpp"
#include "stylseg/style/embedding.hpp"

namespace stylseg {

struct StyleConfig {
  double lambda1 = 1.0;  // directional (adversarial) term
  double lambda2 = 1.0;  // cycle term
  double lambda3 = 1.0;  // SPN term
  int T1 = 40;           // forward steps
  int T2 = 40;           // reverse steps, T2 <= T1
  int n = 400;           // outer iterations
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int window_lo = 0;  // SPN injection window; 0 means 1
  int window_hi = 0;  // 0 means T
  bool train_target_denoiser = false;

  void validate(int steps) const {
    for (double l : {lambda1, lambda2, lambda3}) {
      if (!(l >= 0) || !std::isfinite(l)) throw InputError("style lambdas must be finite and >= 0");
    }
    if (T1 < 1 || T1 > steps) throw InputError("style T1 must lie in [1, " + std::to_string(steps) + "]");
    if (T2 < 1 || T2 > T1) throw InputError("style T2 must lie in [1, T1]");
    if (n < 1) throw InputError("style n must be >= 1");
    if (!(learning_rate > 0)) throw InputError("style learning_rate must be positive");
    const int lo = resolved_lo(), hi = resolved_hi(steps);
    if (!(1 <= lo && lo <= hi && hi <= steps)) throw InputError("style SPN window must satisfy 1 <= lo <= hi <= T");
  }
  int resolved_lo() const { return window_lo > 0 ? window_lo : 1; }
  int resolved_hi(int steps) const { return window_hi > 0 ? window_hi : steps; }
};

inline void to_json(nlohmann::json& j, const StyleConfig& c) {
  j = {{"lambda1", c.lambda1}, {"lambda2", c.lambda2},   {"lambda3", c.lambda3},
       {"T1", c.T1},           {"T2", c.T2},             {"n", c.n},
       {"learning_rate", c.learning_rate},               {"seed", c.seed},
       {"window_lo", c.window_lo}, {"window_hi", c.window_hi},
       {"train_target_denoiser", c.train_target_denoiser}};
}

inline void from_json(const nlohmann::json& j, StyleConfig& c) {
  j.at("lambda1").get_to(c.lambda1);
  j.at("lambda2").get_to(c.lambda2);
  j.at("lambda3").get_to(c.lambda3);
  j.at("T1").get_to(c.T1);
  j.at("T2").get_to(c.T2);
  j.at("n").get_to(c.n);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("seed").get_to(c.seed);
  j.at("window_lo").get_to(c.window_lo);
  j.at("window_hi").get_to(c.window_hi);
  j.at("train_target_denoiser").get_to(c.train_target_denoiser);
}

/// Unweighted components plus the weighted total of one evaluation.
struct StyleLossRecord {
  int iteration = 0;
  double adv = 0, cycle = 0, spn = 0, total = 0;
};

template <typename T>
struct StyleMapper {
  DiffAEModel<T> source_model;  // frozen
  std::shared_ptr<Denoiser<T>> target_denoiser;
  Var<T> target_code;  // [1,d]
  SPNParams<T> spn;
  StyleConfig config;
  std::vector<StyleLossRecord> history;
  std::string source_hash;

  ParamList<T> trainable() const {
    ParamList<T> p{{"target_code", target_code}};
    append(p, spn.parameters(), "spn.");
    if (config.train_target_denoiser) append(p, target_denoiser->parameters(), "target_denoiser.");
    return p;
  }
};

/// Mapper at its starting point: zero SPN, the given target code, and a
/// target denoiser that shares (or, when trainable, copies) the source one.
template <typename T>
StyleMapper<T> make_style_mapper(const DiffAEModel<T>& source, const Tensor<T>& target_code, const StyleConfig& config) {
  const int steps = source.schedule.steps();
  config.validate(steps);
  if (target_code.shape() != Shape{1, source.code_dim()}) {
    throw InputError("target code must be [1," + std::to_string(source.code_dim()) + "], got " +
                     shape_str(target_code.shape()));
  }
  StyleMapper<T> m;
  m.source_model = source;
  set_trainable(source.parameters(), false);
  m.target_denoiser = config.train_target_denoiser ? source.denoiser->clone() : source.denoiser;
  m.target_code = Var<T>::constant(target_code);
  m.spn = zero_spn<T>(source.shape.channels, config.resolved_lo(), config.resolved_hi(steps));
  set_trainable(m.spn.parameters(), false);
  m.config = config;
  return m;
}

/// G: encode T1 steps under the source model with the input's own code, then
/// decode T2 steps under the target denoiser with the target code, adding
/// SPN(x) before each reverse step inside the window. x is [N,C,H,W] in model
/// space. Visited forward states are appended to `visited` when given.
template <typename T>
Var<T> map_to_target(const StyleMapper<T>& m, const Var<T>& x, bool use_spn = true,
                     std::vector<LatentState<T>>* visited = nullptr) {
  const auto& sched = m.source_model.schedule;
  const int n = x.shape().at(0);
  const Var<T> code_in = encode_semantic(x, m.source_model);
  LatentState<T> s = ddim_encode(LatentState<T>{x, 0}, m.config.T1, *m.source_model.denoiser, sched, code_in, visited);
  const Var<T> zb = tile_rows(m.target_code, n);
  const Var<T> correction = use_spn ? spn_apply(x, m.spn) : Var<T>{};
  for (int i = 0; i < m.config.T2; ++i) {
    if (use_spn) s = inject(s, correction, s.t, m.spn);
    s = ddim_reverse_step(s, *m.target_denoiser, sched, zb);
  }
  return s.x;
}

/// F: encode T1 steps under the target denoiser with the target code, then
/// decode T2 steps under the source model with the input's own code.
template <typename T>
Var<T> map_to_source(const StyleMapper<T>& m, const Var<T>& y) {
  const auto& sched = m.source_model.schedule;
  const int n = y.shape().at(0);
  const Var<T> code_y = encode_semantic(y, m.source_model);
  LatentState<T> s =
      ddim_encode(LatentState<T>{y, 0}, m.config.T1, *m.target_denoiser, sched, tile_rows(m.target_code, n));
  return ddim_decode(s, m.config.T2, *m.source_model.denoiser, sched, code_y).x;
}

/// 1 - cos(src_styled - src_in, tgt_styled - tgt_in) on unit-norm
/// embeddings. A zero direction yields 1 and a warning.
template <typename T>
Var<T> adv_loss(const Var<T>& src_in, const Var<T>& src_styled, const Var<T>& tgt_in, const Var<T>& tgt_styled) {
  const Shape& s = src_in.shape();
  for (const Var<T>* v : {&src_styled, &tgt_in, &tgt_styled}) require_same_shape(v->shape(), s, "adv_loss");
  const double tol = sizeof(T) >= 8 ? 1e-6 : 1e-4;
  for (const Var<T>* v : {&src_in, &src_styled, &tgt_in, &tgt_styled}) {
    double n2 = 0;
    for (T x : v->value().values()) n2 += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(n2) - 1.0) > tol) throw InputError("adv_loss: embeddings must have unit norm");
  }
  const Var<T> d1 = sub(src_styled, src_in);
  const Var<T> d2 = sub(tgt_styled, tgt_in);
  auto is_zero = [](const Var<T>& d) {
    for (T x : d.value().values())
      if (x != T(0)) return false;
    return true;
  };
  if (is_zero(d1) || is_zero(d2)) warn("adv_loss: degenerate (zero) direction vector; loss set to 1");
  const Var<T> one = Var<T>::constant(Tensor<T>({1}, T(1)));
  return sub(one, cosine_similarity(d1, d2));
}

/// Sum of the two round-trip L1 terms given a precomputed G(x).
template <typename T>
Var<T> cycle_loss_from(const StyleMapper<T>& m, const Var<T>& gx, const Var<T>& y) {
  const Var<T> gfg = map_to_target(m, map_to_source(m, gx));
  const Var<T> fy = map_to_source(m, y);
  const Var<T> fgf = map_to_source(m, map_to_target(m, fy));
  for (const Var<T>* v : {&gx, &gfg, &fy, &fgf}) {
    if (!v->value().all_finite()) throw NumericError("cycle_loss: non-finite intermediate image");
  }
  return add(mean_abs_diff(gfg, gx), mean_abs_diff(fgf, fy));
}

/// mean|G(F(G(x))) - G(x)| + mean|F(G(F(y))) - F(y)|, images in model space.
template <typename T>
Var<T> cycle_loss(const StyleMapper<T>& m, const Var<T>& x, const Var<T>& y) {
  return cycle_loss_from(m, map_to_target(m, x), y);
}

template <typename T>
struct StyleLossTerms {
  Var<T> adv, cycle, spn, total;
  StyleLossRecord record;
};

/// lambda1*adv + lambda2*cycle + lambda3*spn; components must be finite and
/// nonnegative.
template <typename T>
StyleLossTerms<T> total_style_loss(const Var<T>& adv, const Var<T>& cycle, const Var<T>& spn, const StyleConfig& c) {
  StyleLossTerms<T> out{adv, cycle, spn, {}, {}};
  out.record.adv = static_cast<double>(adv.item());
  out.record.cycle = static_cast<double>(cycle.item());
  out.record.spn = static_cast<double>(spn.item());
  for (double v : {out.record.adv, out.record.cycle, out.record.spn}) {
    if (!std::isfinite(v)) throw NumericError("total_style_loss: non-finite component");
    if (v < 0) throw std::logic_error("total_style_loss: negative loss component");
  }
  const Var<T> partial = axpby(adv, static_cast<T>(c.lambda1), cycle, static_cast<T>(c.lambda2));
  out.total = axpby(partial, T(1), spn, static_cast<T>(c.lambda3));
  out.record.total = static_cast<double>(out.total.item());
  return out;
}

/// Full objective for one iteration. x_in, x_style and y are [1,C,H,W] in
/// model space.
template <typename T>
StyleLossTerms<T> style_objective(const StyleMapper<T>& m, const EmbeddingBackend<T>& embedder, const Var<T>& x_in,
                                  const Var<T>& x_style, const Var<T>& y) {
  const Var<T> batch = concat_batch(x_in, x_style);
  std::vector<LatentState<T>> visited;
  const Var<T> styled = map_to_target(m, batch, true, &visited);

  const Var<T> e_src = embedder.embed(batch);
  const Var<T> e_out = embedder.embed(styled);
  const Var<T> e_ref = embedder.embed(y);
  Var<T> adv;
  for (int i = 0; i < 2; ++i) {
    const Var<T> e_i = slice_batch(e_src, i, 1);
    const Var<T> term = adv_loss(e_i, slice_batch(e_out, i, 1), e_i, e_ref);
    adv = adv.defined() ? add(adv, term) : term;
  }
  adv = scale(adv, T(0.5));

  const Var<T> cyc = cycle_loss_from(m, slice_batch(styled, 0, 1), y);

  std::vector<Var<T>> targets;
  for (const auto& s : visited) targets.push_back(slice_batch(s.x, 0, 1).detach());
  const Var<T> spn = spn_loss(m.spn, x_in, targets);
  return total_style_loss(adv, cyc, spn, m.config);
}

/// One-shot training. x_a and y_b are [C,H,W] images in [0,1]; the target
/// code starts at Enc(y_b). Only the target code and SPN (and, if enabled,
/// the target denoiser) are updated.
template <typename T>
StyleMapper<T> train_style_mapper(const Tensor<T>& x_a, const Tensor<T>& y_b, const DiffAEModel<T>& source,
                                  const EmbeddingBackend<T>& embedder, const StyleConfig& config) {
  const Shape expected = source.shape.unbatched();
  if (x_a.shape() != expected || y_b.shape() != expected) {
    throw InputError("train_style_mapper: images must be " + shape_str(expected));
  }
  const Var<T> x_in = Var<T>::constant(batch_of_one(to_model_space(x_a)));
  const Var<T> y = Var<T>::constant(batch_of_one(to_model_space(y_b)));
  StyleMapper<T> m = make_style_mapper(source, encode_semantic(y, source).value(), config);
  m.source_hash = diffae_content_hash(source);
  const Var<T> z_in = encode_semantic(x_in, source);

  ParamList<T> params = m.trainable();
  set_trainable(params, true);
  Adam<T> opt(params, AdamConfig{config.learning_rate});
  Rng rng(config.seed);
  for (int it = 0; it < config.n; ++it) {
    const Tensor<T> noise = normal_tensor<T>(source.shape.batched(1), rng);
    const Var<T> x_style = generate_conditioned(z_in, Var<T>::constant(noise), source);
    StyleLossTerms<T> terms = style_objective(m, embedder, x_in, x_style, y);
    terms.record.iteration = it;
    if (!std::isfinite(terms.record.total)) {
      std::ostringstream os;
      os << "train_style_mapper: non-finite loss at iteration " << it << " (adv=" << terms.record.adv
         << ", cycle=" << terms.record.cycle << ", spn=" << terms.record.spn << ")";
      throw NumericError(os.str());
    }
    terms.total.backward();
    opt.step();
    if (!all_params_finite(params)) {
      throw NumericError("train_style_mapper: parameters became non-finite at iteration " + std::to_string(it));
    }
    m.history.push_back(terms.record);
  }
  set_trainable(params, false);
  return m;
}

/// Stylizes a batch of [C,H,W] images in [0,1]; outputs are clamped to [0,1].
template <typename T>
std::vector<Tensor<T>> stylize_batch(const std::vector<Tensor<T>>& images, const StyleMapper<T>& m,
                                     int batch_size = 8, bool use_spn = true) {
  if (batch_size < 1) throw InputError("stylize: batch_size must be >= 1");
  const Shape expected = m.source_model.shape.unbatched();
  std::vector<Tensor<T>> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Tensor<T>> chunk;
    for (std::size_t i = start; i < stop; ++i) {
      if (images[i].shape() != expected) {
        throw InputError("stylize: image shape " + shape_str(images[i].shape()) + " does not match mapper " +
                         shape_str(expected));
      }
      chunk.push_back(to_model_space(images[i]));
    }
    std::vector<std::size_t> idx(chunk.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const Tensor<T> y = map_to_target(m, Var<T>::constant(stack_images(chunk, idx)), use_spn).value();
    if (!y.all_finite()) throw NumericError("stylize: non-finite trajectory");
    const std::size_t per = y.size() / chunk.size();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Tensor<T> img(expected);
      for (std::size_t k = 0; k < per; ++k) {
        img[k] = std::clamp((y[i * per + k] + T(1)) / T(2), T(0), T(1));
      }
      out.push_back(std::move(img));
    }
  }
  return out;
}

template <typename T>
Tensor<T> stylize(const Tensor<T>& image, const StyleMapper<T>& m) {
  return stylize_batch(std::vector<Tensor<T>>{image}, m, 1).front();
}

inline constexpr const char* kStyleMapperFormat = "stylseg.style_mapper";
inline constexpr int kStyleMapperVersion = 1;

template <typename T>
nlohmann::json style_mapper_to_json(const StyleMapper<T>& m) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : m.history) {
    history.push_back({{"iteration", r.iteration}, {"adv", r.adv}, {"cycle", r.cycle}, {"spn", r.spn}, {"total", r.total}});
  }
  nlohmann::json j = {{"format", kStyleMapperFormat},
                      {"version", kStyleMapperVersion},
                      {"source_hash", m.source_hash.empty() ? diffae_content_hash(m.source_model) : m.source_hash},
                      {"target_code", tensor_to_json(m.target_code.value())},
                      {"spn", spn_to_json(m.spn)},
                      {"config", m.config},
                      {"history", history}};
  if (m.config.train_target_denoiser) j["target_denoiser"] = params_to_json(m.target_denoiser->parameters());
  return j;
}

/// Rebuilds a mapper against its source model; the source content hash must
/// match the one recorded at training time.
template <typename T>
StyleMapper<T> style_mapper_from_json(const nlohmann::json& j, const DiffAEModel<T>& source) {
  if (j.value("format", "") != kStyleMapperFormat) throw InputError("not a style mapper checkpoint");
  if (j.value("version", 0) != kStyleMapperVersion) throw InputError("unsupported style mapper checkpoint version");
  const std::string hash = diffae_content_hash(source);
  if (j.at("source_hash").get<std::string>() != hash) {
    throw InputError("style mapper was trained against source model " + j.at("source_hash").get<std::string>() +
                     ", got " + hash);
  }
  const StyleConfig config = j.at("config").get<StyleConfig>();
  StyleMapper<T> m = make_style_mapper(source, tensor_from_json<T>(j.at("target_code")), config);
  m.spn = spn_from_json<T>(j.at("spn"));
  m.spn.validate(source.schedule.steps());
  if (m.spn.channels() != source.shape.channels) throw InputError("style mapper SPN channel count mismatch");
  if (config.train_target_denoiser) {
    auto p = m.target_denoiser->parameters();
    params_from_json(p, j.at("target_denoiser"));
    set_trainable(p, false);
  }
  for (const auto& r : j.at("history")) {
    m.history.push_back({r.at("iteration").get<int>(), r.at("adv").get<double>(), r.at("cycle").get<double>(),
                         r.at("spn").get<double>(), r.at("total").get<double>()});
  }
  m.source_hash = hash;
  return m;
}

}  // namespace stylseg
