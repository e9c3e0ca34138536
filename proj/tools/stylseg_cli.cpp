// stylseg: command-line driver for data generation, model training,
// stylization, segmentation, evaluation and reporting.
//
// Exit codes: 0 success, 1 input/usage error, 2 internal or numeric error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>

#include <nlohmann/json.hpp>

#include "stylseg/cli/run_config.hpp"
#include "stylseg/runtime.hpp"

namespace fs = std::filesystem;
using namespace stylseg;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
};

void info(const std::string& m) { std::cerr << m << '\n'; }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create '" + dir + "': " + ec.message());
}

std::string out_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

RunConfig resolve(const Globals& g) {
  RunConfig c;
  if (!g.config_path.empty()) c.load_file(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InputError("--set expects key=value, got '" + kv + "'");
    c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (g.seed_given) c.seed = g.seed;
  if (c.image_size < 8 || c.image_size % 4) throw InputError("image_size must be a multiple of 4 and >= 8");
  c.synth.image_size = c.image_size;
  c.synth.seed = c.seed;
  c.pretrain.image_size = c.image_size;
  c.pretrain.seed = c.seed;
  c.pretrain.diffae.encoder.code_dim = c.pretrain.diffae.denoiser.code_dim;
  c.style.seed = c.seed;
  c.seg.seed = c.seed;
  return c;
}

/// Resolves the config, prepares the output directory and records the
/// resolved config there.
RunConfig start(const Globals& g) {
  if (g.out.empty()) throw InputError("--out is required");
  RunConfig c = resolve(g);
  ensure_dir(g.out);
  write_text_file(out_path(g.out, "config.txt"), c.serialize());
  return c;
}

void require_set(const std::string& value, const char* key) {
  if (value.empty()) throw InputError(std::string("config key '") + key + "' must be set");
}

Image load_image(const std::string& path, int size) {
  if (!fs::is_regular_file(path)) throw InputError("missing image '" + path + "'");
  return resize_bilinear(image_from_raster(read_png(path, 3)), size, size);
}

std::vector<Sample> load_labelled(const std::string& root, int size) {
  auto samples = load_dataset(root, size);
  for (const auto& s : samples) {
    if (!s.mask) throw InputError("dataset '" + root + "' has no mask for '" + s.id + "'");
  }
  return samples;
}

std::string loss_csv(const std::vector<double>& losses, const char* column) {
  std::string s = std::string("epoch,") + column + "\n";
  for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i) + "," + detail::fmt_double(losses[i]) + "\n";
  return s;
}

void cmd_synth(const Globals& g) {
  RunConfig c = start(g);
  const auto [source, target] = generate_synthetic(c.synth);
  save_images(source, out_path(g.out, "source"));
  save_images(target, out_path(g.out, "target"));
  info("wrote " + std::to_string(source.size()) + " source and " + std::to_string(target.size()) + " target samples");
}

Pretrained run_pretrain(RunConfig& c, const std::string& out) {
  std::vector<Tensor<float>> extra;
  if (!c.diffae_train_dir.empty()) extra = sample_images(load_dataset(c.diffae_train_dir, c.image_size));
  Pretrained p = pretrain(c.pretrain, extra, info);
  save_diffae(p.diffae, out_path(out, "diffae.json"));
  write_text_file(out_path(out, "embedder.json"), embedder_to_json(*p.embedder).dump());
  write_text_file(out_path(out, "diffae_losses.csv"), loss_csv(p.diffae_epoch_losses, "loss"));
  write_text_file(out_path(out, "embedder_losses.csv"), loss_csv(p.embedder_losses, "loss"));
  return p;
}

void cmd_train_diffae(const Globals& g) {
  RunConfig c = start(g);
  run_pretrain(c, g.out);
}

void cmd_train_style(const Globals& g) {
  RunConfig c = start(g);
  require_set(c.source_image, "style.source_image");
  require_set(c.target_image, "style.target_image");
  const Image x = load_image(c.source_image, c.image_size);
  const Image y = load_image(c.target_image, c.image_size);

  DiffAEModel<float> diffae;
  std::shared_ptr<ConvEmbedder<float>> embedder;
  const bool have = !c.diffae_path.empty() && fs::exists(c.diffae_path) && !c.embedder_path.empty() &&
                    fs::exists(c.embedder_path);
  if (have) {
    diffae = load_diffae<float>(c.diffae_path);
    embedder = embedder_from_json<float>(read_json_file(c.embedder_path));
  } else if (c.train_diffae_if_missing) {
    info("no DiffAE/embedder checkpoint; pretraining");
    Pretrained p = run_pretrain(c, g.out);
    diffae = p.diffae;
    embedder = p.embedder;
  } else {
    require_set(c.diffae_path, "style.diffae");
    require_set(c.embedder_path, "style.embedder");
    throw InputError("missing checkpoint '" + (fs::exists(c.diffae_path) ? c.embedder_path : c.diffae_path) + "'");
  }
  if (diffae.shape.height != c.image_size) throw InputError("DiffAE was trained at a different image_size");

  const auto mapper = train_style_mapper(x, y, diffae, *embedder, c.style);
  write_text_file(out_path(g.out, "style_mapper.json"), style_mapper_to_json(mapper).dump());
  std::string hist = "iteration,adv,cycle,spn,total\n";
  for (const auto& r : mapper.history) {
    hist += std::to_string(r.iteration) + "," + detail::fmt_double(r.adv) + "," + detail::fmt_double(r.cycle) + "," +
            detail::fmt_double(r.spn) + "," + detail::fmt_double(r.total) + "\n";
  }
  write_text_file(out_path(g.out, "style_history.csv"), hist);
  info("style mapper trained for " + std::to_string(mapper.history.size()) + " iterations");
}

void cmd_stylize(const Globals& g) {
  RunConfig c = start(g);
  require_set(c.mapper_path, "stylize.mapper");
  require_set(c.diffae_path, "style.diffae");
  require_set(c.stylize_input, "stylize.input");
  const auto diffae = load_diffae<float>(c.diffae_path);
  const auto mapper = style_mapper_from_json<float>(read_json_file(c.mapper_path), diffae);
  auto samples = load_dataset(c.stylize_input, diffae.shape.height);
  const auto styled = stylize_batch(sample_images(samples), mapper, c.stylize_batch);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].image = styled[i];
  const auto manifest = save_images(samples, g.out);
  info("stylized " + std::to_string(samples.size()) + " images, manifest checksum " + manifest.checksum);
}

void cmd_train_seg(const Globals& g) {
  RunConfig c = start(g);
  require_set(c.seg_train_dir, "seg.train_dir");
  const auto samples = load_labelled(c.seg_train_dir, c.image_size);
  const auto r = train_segmenter(sample_images(samples), sample_masks(samples), c.seg);
  write_text_file(out_path(g.out, "segmenter.json"), segmenter_to_json(*r.segmenter).dump());
  write_text_file(out_path(g.out, "seg_history.csv"), loss_csv(r.epoch_losses, "loss"));
  info("segmenter final epoch loss " + format_number(r.epoch_losses.back()));
}

void cmd_evaluate(const Globals& g) {
  RunConfig c = start(g);
  require_set(c.test_dir, "evaluate.test_dir");
  check_threshold(c.threshold);
  BatchEvaluation e;
  if (!c.pred_dir.empty()) {
    e = evaluate_directories(c.pred_dir, out_path(c.test_dir, "masks"), c.threshold);
  } else {
    require_set(c.segmenter_path, "evaluate.segmenter");
    const auto net = segmenter_from_json<float>(read_json_file(c.segmenter_path));
    const auto samples = load_labelled(c.test_dir, c.image_size);
    const auto preds = predict_masks<float>(*net, sample_images(samples), c.threshold);
    ensure_dir(out_path(g.out, "prob"));
    ensure_dir(out_path(g.out, "pred"));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& p = preds[i];
      Raster8 r{p.prob.height, p.prob.width, 1, std::vector<std::uint8_t>(p.prob.size())};
      for (std::size_t k = 0; k < p.prob.size(); ++k) r.pixels[k] = quantize_unit(p.prob[k]);
      write_png(out_path(out_path(g.out, "prob"), samples[i].id + ".png"), r);
      write_png(out_path(out_path(g.out, "pred"), samples[i].id + ".png"), raster_from_mask(p.mask));
      e.ids.push_back(samples[i].id);
      e.per_sample.push_back(evaluate_all(p.prob, *samples[i].mask, c.threshold));
    }
    e.mean = mean_report(e.per_sample);
  }
  write_evaluation(e, g.out);
  std::cout << metrics_csv_header() << metrics_csv_row(e.mean);
}

// Display titles for the comparison table, in column order.
const std::array<const char*, 7> kTableTitles{"Dice", "IoU", "Specificity", "F_beta^w", "S_alpha", "E_phi^max", "MAE"};
const std::array<const char*, 7> kRadarAxes{"Dice", "IoU", "Specificity", "F_beta^w", "S_alpha", "E_phi^max", "1-MAE"};

void cmd_report(const Globals& g, const std::vector<std::string>& inputs, const std::vector<std::string>& names) {
  start(g);
  if (inputs.empty()) throw InputError("report needs at least one evaluation CSV or directory");
  if (!names.empty() && names.size() != inputs.size()) throw InputError("--name must be given once per input");
  std::vector<std::pair<std::string, MetricReport>> runs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    fs::path p = inputs[i];
    if (fs::is_directory(p)) p /= "mean.csv";
    std::string name = names.empty() ? "" : names[i];
    if (name.empty()) {
      name = fs::is_directory(inputs[i]) ? fs::path(inputs[i]).lexically_normal().filename().string()
                                         : p.parent_path().filename().string() + "/" + p.stem().string();
      if (name.empty()) name = p.stem().string();
    }
    const MetricReport r = mean_report(read_metrics_csv(p.string()));
    for (double v : r.values()) {
      if (!(v >= 0 && v <= 1)) throw InputError("'" + p.string() + "' has a metric outside [0,1]");
    }
    runs.emplace_back(name, r);
  }

  std::string csv = "model";
  for (const char* col : MetricReport::kColumns) csv += std::string(",") + col;
  csv += "\n";
  for (const auto& [name, r] : runs) {
    csv += name;
    for (double v : r.values()) csv += "," + format_number(v);
    csv += "\n";
  }
  write_text_file(out_path(g.out, "table.csv"), csv);

  std::size_t name_w = 5;
  for (const auto& run : runs) name_w = std::max(name_w, run.first.size());
  auto pad = [](std::string s, std::size_t w) { return s.size() < w ? s + std::string(w - s.size(), ' ') : s; };
  std::string text = pad("Model", name_w);
  for (const char* t : kTableTitles) text += "  " + pad(t, 11);
  text += "\n";
  for (const auto& [name, r] : runs) {
    text += pad(name, name_w);
    for (double v : r.values()) text += "  " + pad(format_number(v).substr(0, 6), 11);
    text += "\n";
  }
  write_text_file(out_path(g.out, "table.txt"), text);

  nlohmann::ordered_json radar = nlohmann::ordered_json::array();
  for (const auto& [name, r] : runs) {
    nlohmann::ordered_json axes = nlohmann::ordered_json::object();
    const auto values = r.radar();
    for (std::size_t k = 0; k < values.size(); ++k) axes[kRadarAxes[k]] = values[k];
    radar.push_back({{"model", name}, {"axes", axes}});
  }
  write_text_file(out_path(g.out, "radar.json"), radar.dump(2) + "\n");
  std::cout << text;
}

}  // namespace

int main(int argc, char** argv) {
  configure_floating_point();
  CLI::App app{"stylseg: one-shot stylization for domain-shift-robust lesion segmentation"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config_path, "key = value config file");
    sub->add_option("--set", g.overrides, "override a config key (key=value), repeatable");
    sub->add_option("--seed", g.seed, "seed for every stochastic stage")->each([&](const std::string&) { g.seed_given = true; });
    sub->add_option("--out", g.out, "output directory")->required();
  };
  std::vector<std::string> report_inputs, report_names;
  std::map<std::string, std::function<void()>> handlers{
      {"synth-data", [&] { cmd_synth(g); }},
      {"train-diffae", [&] { cmd_train_diffae(g); }},
      {"train-style", [&] { cmd_train_style(g); }},
      {"stylize", [&] { cmd_stylize(g); }},
      {"train-seg", [&] { cmd_train_seg(g); }},
      {"evaluate", [&] { cmd_evaluate(g); }},
      {"report", [&] { cmd_report(g, report_inputs, report_names); }},
  };
  const std::map<std::string, std::string> help{
      {"synth-data", "generate the synthetic source/target datasets"},
      {"train-diffae", "pretrain the diffusion autoencoder and the embedding model"},
      {"train-style", "fit a style mapper from one source and one target image"},
      {"stylize", "stylize a dataset with a trained mapper (masks pass through)"},
      {"train-seg", "train a segmenter on a labelled dataset"},
      {"evaluate", "score a segmenter (or precomputed maps) on a labelled test set"},
      {"report", "build the comparison table and radar records from evaluation CSVs"},
  };
  for (const auto& [name, text] : help) {
    CLI::App* sub = app.add_subcommand(name, text);
    add_globals(sub);
    if (name == "report") {
      sub->add_option("inputs", report_inputs, "evaluation directories or metric CSV files")->required();
      sub->add_option("--name", report_names, "display name per input, in order");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    handlers.at(app.get_subcommands().front()->get_name())();
    return 0;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
}
