#pragma once

// Pretraining of the generic generative/embedding models and the
// raw-vs-stylized domain-shift experiment built on top of them.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stylseg/data/synthetic.hpp"
#include "stylseg/metrics/metrics.hpp"
#include "stylseg/segmentation/segmentation.hpp"
#include "stylseg/style/embedding.hpp"
#include "stylseg/style/style.hpp"

namespace stylseg {

using Logger = std::function<void(const std::string&)>;

inline std::vector<Tensor<float>> sample_images(const std::vector<Sample>& samples) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

inline std::vector<BinaryMask> sample_masks(const std::vector<Sample>& samples) {
  std::vector<BinaryMask> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.mask) throw InputError("sample '" + s.id + "' has no mask");
    out.push_back(*s.mask);
  }
  return out;
}

/// Desk-scale defaults. The schedule is compressed to 40 steps with betas
/// scaled up so that the final step is close to pure noise.
inline DiffAETrainConfig desk_diffae_config() {
  DiffAETrainConfig c;
  c.timesteps = 40;
  c.beta_start = 1e-3;
  c.beta_end = 0.2;
  c.denoiser.width = 16;
  c.denoiser.time_dim = 32;
  c.denoiser.code_dim = 32;
  c.encoder.width = 16;
  c.encoder.code_dim = 32;
  c.epochs = 8;
  c.batch_size = 8;
  c.learning_rate = 2e-3;
  return c;
}

inline StyleConfig desk_style_config() {
  StyleConfig c;
  c.T1 = 12;
  c.T2 = 12;
  c.n = 30;
  c.learning_rate = 5e-3;
  c.lambda3 = 1e-3;
  return c;
}

inline SegConfig desk_seg_config() {
  SegConfig c;
  c.epochs = 10;
  c.batch_size = 12;
  c.learning_rate = 2e-3;
  c.net.width = 8;
  return c;
}

struct PretrainConfig {
  int corpus_count = 400;  // broad-style images; 0 uses only the supplied images
  int image_size = 64;
  std::uint64_t seed = 0;
  DiffAETrainConfig diffae = desk_diffae_config();
  EmbedderTrainConfig embedder;
};

struct Pretrained {
  DiffAEModel<float> diffae;
  std::shared_ptr<ConvEmbedder<float>> embedder;
  std::vector<double> diffae_epoch_losses;
  std::vector<double> embedder_losses;
};

/// Trains the DiffAE and the embedder on a broad-style corpus (plus any
/// extra images), standing in for generic pretrained backbones.
inline Pretrained pretrain(const PretrainConfig& config, const std::vector<Tensor<float>>& extra = {},
                           const Logger& log = {}) {
  std::vector<Tensor<float>> images;
  if (config.corpus_count > 0) {
    images = sample_images(generate_style_corpus(config.corpus_count, config.image_size, config.seed));
  }
  images.insert(images.end(), extra.begin(), extra.end());
  if (images.empty()) throw InputError("pretrain: no training images");
  DiffAETrainConfig dc = config.diffae;
  dc.seed = config.seed;
  auto d = train_diffae(images, dc);
  if (log) log("diffae: " + std::to_string(d.epoch_losses.size()) + " epochs, final loss " + format_number(d.epoch_losses.back()));
  EmbedderTrainConfig ec = config.embedder;
  ec.seed = config.seed + 1;
  auto e = train_embedder(images, ec);
  if (log) log("embedder: final loss " + format_number(e.losses.back()));
  return {d.model, e.embedder, d.epoch_losses, e.losses};
}

struct DomainShiftConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  SynthConfig synth = [] {
    SynthConfig s;
    s.count = 200;
    s.target_count = 20;
    s.image_size = 64;
    return s;
  }();
  StyleConfig style = desk_style_config();
  SegConfig seg = desk_seg_config();
  double threshold = 0.5;
};

struct DomainShiftSeed {
  std::uint64_t seed = 0;
  MetricReport raw, stylized;
  std::vector<StyleLossRecord> style_history;
  std::vector<Sample> source_train;          // first samples kept for inspection
  std::vector<Tensor<float>> stylized_train;  // matching stylized images
};

/// Per seed: generate both domains, fit a style mapper from one source image
/// to one target test image, then train two segmenters from the same seed
/// (raw vs stylized training images) and score both on the target test set.
inline std::vector<DomainShiftSeed> run_domain_shift(const Pretrained& models, const DomainShiftConfig& config,
                                                     const Logger& log = {}, std::size_t keep = 20) {
  std::vector<DomainShiftSeed> out;
  for (std::uint64_t seed : config.seeds) {
    SynthConfig sc = config.synth;
    sc.seed = seed;
    const auto [source, target] = generate_synthetic(sc);
    StyleConfig st = config.style;
    st.seed = seed;
    const auto mapper = train_style_mapper(source.front().image, target.front().image, models.diffae, *models.embedder, st);
    const auto train_images = sample_images(source);
    const auto styled = stylize_batch(train_images, mapper);
    const auto labels = sample_masks(source);
    const auto test_images = sample_images(target);
    const auto test_masks = sample_masks(target);

    SegConfig sg = config.seg;
    sg.seed = seed;
    DomainShiftSeed r;
    r.seed = seed;
    r.style_history = mapper.history;
    for (int arm = 0; arm < 2; ++arm) {
      const auto res = run_pipeline<float>(arm ? styled : train_images, labels, test_images, nullptr, sg, config.threshold);
      std::vector<MetricReport> reports;
      for (std::size_t i = 0; i < test_masks.size(); ++i) {
        reports.push_back(evaluate_all(res.predictions[i].prob, test_masks[i], config.threshold));
      }
      (arm ? r.stylized : r.raw) = mean_report(reports);
    }
    for (std::size_t i = 0; i < std::min(keep, source.size()); ++i) {
      r.source_train.push_back(source[i]);
      r.stylized_train.push_back(styled[i]);
    }
    if (log) {
      log("seed " + std::to_string(seed) + ": raw dice " + format_number(r.raw.dice) + " mae " + format_number(r.raw.mae) +
          " | stylized dice " + format_number(r.stylized.dice) + " mae " + format_number(r.stylized.mae));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace stylseg
