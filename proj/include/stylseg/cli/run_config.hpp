#pragma once

// Flat `key = value` run configuration shared by all command-line tools.

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stylseg/experiment.hpp"

namespace stylseg {

struct RunConfig {
  std::uint64_t seed = 0;
  int image_size = 64;

  // synth-data
  SynthConfig synth = [] {
    SynthConfig s;
    s.count = 200;
    s.target_count = 20;
    return s;
  }();

  // train-diffae
  PretrainConfig pretrain;
  std::string diffae_train_dir;  // optional dataset root mixed into the corpus

  // train-style
  StyleConfig style = desk_style_config();
  std::string diffae_path;
  std::string embedder_path;
  std::string source_image;
  std::string target_image;
  bool train_diffae_if_missing = false;

  // stylize
  std::string mapper_path;
  std::string stylize_input;
  int stylize_batch = 8;

  // train-seg / evaluate
  SegConfig seg = desk_seg_config();
  std::string seg_train_dir;
  std::string segmenter_path;
  std::string test_dir;
  std::string pred_dir;
  double threshold = 0.5;

  struct Field {
    std::string key;
    std::string help;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  /// Every configurable key, bound to this instance, in serialization order.
  std::vector<Field> fields();

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key);
  std::string serialize();
  /// Applies `key = value` lines; '#' starts a comment.
  void load_text(const std::string& text, const std::string& origin);
  void load_file(const std::string& path);
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Parse>
auto parse_whole(const std::string& key, const std::string& v, Parse parse, const char* kind) {
  try {
    std::size_t used = 0;
    auto out = parse(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InputError("config key '" + key + "': expected " + kind + ", got '" + v + "'");
  }
}

inline RunConfig::Field int_field(std::string key, std::string help, int& ref) {
  return {key, std::move(help), [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) { ref = parse_whole(key, v, [](const std::string& s, std::size_t* u) { return std::stoi(s, u); }, "an integer"); }};
}

inline RunConfig::Field u64_field(std::string key, std::string help, std::uint64_t& ref) {
  return {key, std::move(help), [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) {
            if (!v.empty() && v[0] == '-') throw InputError("config key '" + key + "': expected a non-negative integer");
            ref = parse_whole(key, v, [](const std::string& s, std::size_t* u) { return std::stoull(s, u); }, "a non-negative integer");
          }};
}

inline RunConfig::Field double_field(std::string key, std::string help, double& ref) {
  return {key, std::move(help), [&ref] { return fmt_double(ref); },
          [&ref, key](const std::string& v) { ref = parse_whole(key, v, [](const std::string& s, std::size_t* u) { return std::stod(s, u); }, "a number"); }};
}

inline RunConfig::Field bool_field(std::string key, std::string help, bool& ref) {
  return {key, std::move(help), [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& v) {
            if (v == "true") ref = true;
            else if (v == "false") ref = false;
            else throw InputError("config key '" + key + "': expected true or false, got '" + v + "'");
          }};
}

inline RunConfig::Field string_field(std::string key, std::string help, std::string& ref) {
  return {key, std::move(help), [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

inline void style_fields(std::vector<RunConfig::Field>& f, const std::string& p, StyleDescriptor& s) {
  f.push_back(string_field(p + "texture", "background texture: smooth | stripes | blotches", s.texture));
  f.push_back(double_field(p + "hue_min", "background hue range start (degrees)", s.hue_min));
  f.push_back(double_field(p + "hue_max", "background hue range end (degrees)", s.hue_max));
  f.push_back(double_field(p + "saturation", "background saturation", s.saturation));
  f.push_back(double_field(p + "value", "background value", s.value));
  f.push_back(double_field(p + "texture_strength", "texture modulation amplitude", s.texture_strength));
  f.push_back(double_field(p + "lesion_hue_offset", "lesion hue relative to background (degrees)", s.lesion_hue_offset));
  f.push_back(double_field(p + "lesion_saturation", "lesion saturation", s.lesion_saturation));
  f.push_back(double_field(p + "lesion_value", "lesion value", s.lesion_value));
  f.push_back(double_field(p + "noise", "per-pixel noise stddev", s.noise));
}

}  // namespace detail

inline std::vector<RunConfig::Field> RunConfig::fields() {
  using namespace detail;
  std::vector<Field> f;
  f.push_back(u64_field("seed", "seed for every stochastic stage", seed));
  f.push_back(int_field("image_size", "side length images are generated or resized to", image_size));

  f.push_back(int_field("synth.count", "source samples", synth.count));
  f.push_back(int_field("synth.target_count", "target samples (0: same as synth.count)", synth.target_count));
  style_fields(f, "synth.source.", synth.source);
  style_fields(f, "synth.target.", synth.target);
  f.push_back(string_field("synth.lesion.shape", "lesion shape: ellipse | blob", synth.lesion.shape));
  f.push_back(double_field("synth.lesion.radius_min", "minimum lesion radius (fraction of size)", synth.lesion.radius_min));
  f.push_back(double_field("synth.lesion.radius_max", "maximum lesion radius (fraction of size)", synth.lesion.radius_max));
  f.push_back(int_field("synth.lesion.count_min", "minimum lesions per image", synth.lesion.count_min));
  f.push_back(int_field("synth.lesion.count_max", "maximum lesions per image", synth.lesion.count_max));

  DiffAETrainConfig& d = pretrain.diffae;
  f.push_back(int_field("diffae.timesteps", "diffusion steps T", d.timesteps));
  f.push_back(double_field("diffae.beta_start", "first beta of the linear schedule", d.beta_start));
  f.push_back(double_field("diffae.beta_end", "last beta of the linear schedule", d.beta_end));
  f.push_back(int_field("diffae.width", "denoiser base width", d.denoiser.width));
  f.push_back(int_field("diffae.time_dim", "timestep embedding size", d.denoiser.time_dim));
  f.push_back(int_field("diffae.code_dim", "semantic code size", d.denoiser.code_dim));
  f.push_back(int_field("diffae.blocks", "residual blocks per level", d.denoiser.blocks));
  f.push_back(int_field("diffae.encoder_width", "semantic encoder base width", d.encoder.width));
  f.push_back(int_field("diffae.epochs", "training epochs", d.epochs));
  f.push_back(int_field("diffae.batch_size", "training batch size", d.batch_size));
  f.push_back(double_field("diffae.learning_rate", "Adam learning rate", d.learning_rate));
  f.push_back(int_field("diffae.corpus_count", "broad-style corpus size (0: train_dir only)", pretrain.corpus_count));
  f.push_back(string_field("diffae.train_dir", "optional dataset root added to the corpus", diffae_train_dir));

  EmbedderTrainConfig& e = pretrain.embedder;
  f.push_back(int_field("embedder.width", "embedding encoder base width", e.encoder.width));
  f.push_back(int_field("embedder.dim", "embedding size", e.encoder.code_dim));
  f.push_back(int_field("embedder.steps", "contrastive training steps", e.steps));
  f.push_back(int_field("embedder.batch_size", "contrastive batch size", e.batch_size));
  f.push_back(double_field("embedder.learning_rate", "Adam learning rate", e.learning_rate));
  f.push_back(double_field("embedder.temperature", "contrastive temperature", e.temperature));
  f.push_back(double_field("embedder.noise", "augmentation noise (model-space units)", e.noise));

  f.push_back(double_field("style.lambda1", "weight of the directional term", style.lambda1));
  f.push_back(double_field("style.lambda2", "weight of the cycle term", style.lambda2));
  f.push_back(double_field("style.lambda3", "weight of the structure-preservation term", style.lambda3));
  f.push_back(int_field("style.T1", "inversion steps", style.T1));
  f.push_back(int_field("style.T2", "generation steps (<= T1)", style.T2));
  f.push_back(int_field("style.n", "optimisation iterations", style.n));
  f.push_back(double_field("style.learning_rate", "Adam learning rate", style.learning_rate));
  f.push_back(int_field("style.window_lo", "first step receiving SPN injection (0: 1)", style.window_lo));
  f.push_back(int_field("style.window_hi", "last step receiving SPN injection (0: T)", style.window_hi));
  f.push_back(bool_field("style.train_target_denoiser", "fine-tune a copy of the denoiser for the target", style.train_target_denoiser));
  f.push_back(string_field("style.diffae", "DiffAE checkpoint", diffae_path));
  f.push_back(string_field("style.embedder", "embedder checkpoint", embedder_path));
  f.push_back(string_field("style.source_image", "source-domain example image", source_image));
  f.push_back(string_field("style.target_image", "target-domain example image", target_image));
  f.push_back(bool_field("style.train_diffae_if_missing", "pretrain DiffAE and embedder when the checkpoints are absent", train_diffae_if_missing));

  f.push_back(string_field("stylize.mapper", "style mapper checkpoint", mapper_path));
  f.push_back(string_field("stylize.input", "dataset root to stylize", stylize_input));
  f.push_back(int_field("stylize.batch_size", "images per generation batch", stylize_batch));

  f.push_back(int_field("seg.epochs", "segmenter training epochs", seg.epochs));
  f.push_back(int_field("seg.batch_size", "segmenter batch size", seg.batch_size));
  f.push_back(double_field("seg.learning_rate", "Adam learning rate", seg.learning_rate));
  f.push_back(double_field("seg.loss_mix", "BCE share of the segmentation loss", seg.loss_mix));
  f.push_back(int_field("seg.width", "segmenter base width", seg.net.width));
  f.push_back(string_field("seg.train_dir", "labelled training dataset root", seg_train_dir));

  f.push_back(string_field("evaluate.segmenter", "segmenter checkpoint", segmenter_path));
  f.push_back(string_field("evaluate.test_dir", "labelled test dataset root", test_dir));
  f.push_back(string_field("evaluate.pred_dir", "precomputed probability maps (skips the segmenter)", pred_dir));
  f.push_back(double_field("evaluate.threshold", "binarization threshold", threshold));
  return f;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : fields()) {
    if (f.key == key) {
      f.set(value);
      return;
    }
  }
  throw InputError("unknown config key '" + key + "'");
}

inline std::string RunConfig::get(const std::string& key) {
  for (auto& f : fields()) {
    if (f.key == key) return f.get();
  }
  throw InputError("unknown config key '" + key + "'");
}

inline std::string RunConfig::serialize() {
  std::string out;
  for (auto& f : fields()) out += f.key + " = " + f.get() + "\n";
  return out;
}

inline void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    try {
      set(key, detail::trim(line.substr(eq + 1)));
    } catch (const InputError& e) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

}  // namespace stylseg
