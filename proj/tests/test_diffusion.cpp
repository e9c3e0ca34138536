#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "stylseg/data/synthetic.hpp"
#include "stylseg/diffusion/diffae.hpp"

using namespace stylseg;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor<double>(std::move(shape), rng);
}

std::vector<Tensor<float>> synthetic_images(int n, int size, std::uint64_t seed) {
  SynthConfig sc;
  sc.count = n;
  sc.image_size = size;
  sc.seed = seed;
  std::vector<Tensor<float>> out;
  for (auto& s : generate_synthetic(sc).first) out.push_back(s.image);
  return out;
}

DiffAETrainConfig tiny_config(int epochs, std::uint64_t seed) {
  DiffAETrainConfig c;
  c.timesteps = 20;
  c.denoiser.width = 8;
  c.denoiser.time_dim = 16;
  c.denoiser.code_dim = 16;
  c.encoder.width = 8;
  c.encoder.code_dim = 16;
  c.epochs = epochs;
  c.batch_size = 4;
  c.learning_rate = 2e-3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Schedule, LinearBetaInvariants) {
  const auto s = NoiseSchedule::linear_beta(100);
  EXPECT_EQ(s.steps(), 100);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  for (int t = 0; t < 100; ++t) EXPECT_LT(s.alpha_bar(t + 1), s.alpha_bar(t));
  EXPECT_GT(s.alpha_bar(100), 0.0);
  EXPECT_NEAR(s.alpha_bar(1), 1.0 - 1e-4, 1e-15);
}

TEST(Schedule, RejectsInvalidTables) {
  EXPECT_THROW(NoiseSchedule({1.0, 0.9, 0.95}), InputError);
  EXPECT_THROW(NoiseSchedule({0.99, 0.9}), InputError);
  EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.0}), InputError);
  EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.5}), InputError);
  EXPECT_NO_THROW(NoiseSchedule::with_flat_segments({1.0, 0.5, 0.5}));
  EXPECT_THROW(NoiseSchedule::linear_beta(0), InputError);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = NoiseSchedule::linear_beta(37, 2e-4, 0.03);
  const auto r = NoiseSchedule::from_json(s.to_json());
  EXPECT_EQ(r.table(), s.table());
}

TEST(PredictX0, HandEvaluation) {
  const auto s = NoiseSchedule::with_flat_segments({1.0, 0.25});
  const Tensor<double> x({1}, 1.0), eps({1}, 0.5);
  const auto out = predict_x0(x, 1, eps, s);
  EXPECT_NEAR(out[0], (1.0 - std::sqrt(0.75) * 0.5) / 0.5, 1e-15);
  EXPECT_NEAR(out[0], 1.133975, 1e-6);
}

TEST(PredictX0, ZeroNoiseScalesAndInvertsNoising) {
  const auto s = NoiseSchedule::linear_beta(50);
  const auto x = random_tensor({2, 3, 4, 4}, 1);
  const auto zero = Tensor<double>(x.shape());
  const auto out = predict_x0(x, 17, zero, s);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i] / std::sqrt(s.alpha_bar(17)), 1e-14);

  const auto n = random_tensor(x.shape(), 2);
  Tensor<double> xt(x.shape());
  const double a = s.alpha_bar(30);
  for (std::size_t i = 0; i < x.size(); ++i) xt[i] = std::sqrt(a) * x[i] + std::sqrt(1 - a) * n[i];
  EXPECT_LT(max_abs_diff(predict_x0(xt, 30, n, s), x), 1e-12);
}

TEST(PredictX0, Errors) {
  const auto s = NoiseSchedule::linear_beta(10);
  const Tensor<double> x({1, 1, 2, 2});
  EXPECT_THROW(predict_x0(x, 11, x, s), InputError);
  EXPECT_THROW(predict_x0(x, -1, x, s), InputError);
  EXPECT_THROW(predict_x0(x, 3, Tensor<double>({1, 1, 2, 3}), s), InputError);
}

TEST(DdimStep, ZeroDenoiserClosedForms) {
  const auto s = NoiseSchedule::linear_beta(40);
  const ZeroDenoiser<double> zero;
  const auto x = random_tensor({1, 3, 4, 4}, 3);
  auto f = ddim_forward_step(LatentState<double>{Var<double>::constant(x), 7}, zero, s);
  EXPECT_EQ(f.t, 8);
  const double k = std::sqrt(s.alpha_bar(8) / s.alpha_bar(7));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(f.x.value()[i], k * x[i], 1e-12);

  // Two reverse steps T -> T-2.
  auto r = ddim_decode(LatentState<double>{Var<double>::constant(x), 40}, 2, zero, s);
  EXPECT_EQ(r.t, 38);
  const double k2 = std::sqrt(s.alpha_bar(38) / s.alpha_bar(40));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(r.x.value()[i], k2 * x[i], 1e-12);

  // n forward steps scale by sqrt(a_{t+n} / a_t).
  auto e = ddim_encode(LatentState<double>{Var<double>::constant(x), 3}, 20, zero, s);
  const double kn = std::sqrt(s.alpha_bar(23) / s.alpha_bar(3));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(e.x.value()[i], kn * x[i], 1e-12);
}

TEST(DdimStep, ReverseToCleanEndpoint) {
  const auto s = NoiseSchedule::with_flat_segments({1.0, 0.8, 0.5});
  const ZeroDenoiser<double> zero;
  const auto x = random_tensor({1, 1, 3, 3}, 4);
  auto r = ddim_reverse_step(LatentState<double>{Var<double>::constant(x), 1}, zero, s);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(r.x.value()[i], x[i] / std::sqrt(0.8), 1e-14);
}

TEST(DdimStep, FlatSegmentIsIdentity) {
  const auto s = NoiseSchedule::with_flat_segments({1.0, 0.9, 0.9, 0.7});
  const ConstantDenoiser<double> c(random_tensor({1, 2, 3, 3}, 5));
  const auto x = random_tensor({1, 2, 3, 3}, 6);
  auto f = ddim_forward_step(LatentState<double>{Var<double>::constant(x), 1}, c, s);
  EXPECT_LT(max_abs_diff(f.x.value(), x), 1e-14);
}

TEST(DdimStep, ConstantNoiseRoundTrip) {
  const auto s = NoiseSchedule::linear_beta(60);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const ConstantDenoiser<double> c(random_tensor({1, 3, 5, 5}, 100 + trial));
    const auto x = random_tensor({1, 3, 5, 5}, 200 + trial);
    const int start = static_cast<int>(trial * 3);
    auto f = ddim_encode(LatentState<double>{Var<double>::constant(x), start}, 20, c, s);
    auto r = ddim_decode(f, 20, c, s);
    EXPECT_EQ(r.t, start);
    EXPECT_LE(max_abs_diff(r.x.value(), x), 1e-6);
    auto one = ddim_reverse_step(ddim_forward_step(LatentState<double>{Var<double>::constant(x), 10}, c, s), c, s);
    EXPECT_LE(max_abs_diff(one.x.value(), x), 1e-6);
  }
}

TEST(DdimStep, RangeErrorsAndDeterminism) {
  const auto s = NoiseSchedule::linear_beta(5);
  const ZeroDenoiser<double> zero;
  const auto x = Var<double>::constant(random_tensor({1, 1, 2, 2}, 7));
  EXPECT_THROW(ddim_forward_step(LatentState<double>{x, 5}, zero, s), InputError);
  EXPECT_THROW(ddim_reverse_step(LatentState<double>{x, 0}, zero, s), InputError);
  const ConstantDenoiser<double> c(random_tensor({1, 1, 2, 2}, 8));
  auto a = ddim_forward_step(LatentState<double>{x, 2}, c, s);
  auto b = ddim_forward_step(LatentState<double>{x, 2}, c, s);
  EXPECT_TRUE(a.x.value() == b.x.value());
}

TEST(DdimStep, NonFiniteDenoiserOutputIsNumericError) {
  const auto s = NoiseSchedule::linear_beta(5);
  Tensor<double> bad({1, 1, 2, 2});
  bad[0] = std::nan("");
  const ConstantDenoiser<double> c(bad);
  const auto x = Var<double>::constant(Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(ddim_forward_step(LatentState<double>{x, 1}, c, s), NumericError);
}

TEST(Conditioning, IgnoredCodeGivesIdenticalTrajectories) {
  const auto s = NoiseSchedule::linear_beta(12);
  const ConstantDenoiser<double> c(random_tensor({1, 3, 4, 4}, 9));
  const auto x = Var<double>::constant(random_tensor({1, 3, 4, 4}, 10));
  const auto code = Var<double>::constant(random_tensor({1, 8}, 11));
  auto a = ddim_encode(LatentState<double>{x, 0}, 12, c, s, code);
  auto b = ddim_encode(LatentState<double>{x, 0}, 12, c, s);
  EXPECT_TRUE(a.x.value() == b.x.value());
}

TEST(ConvDenoiser, ShapesAndCodeSensitivity) {
  Rng rng(1);
  DenoiserConfig cfg;
  cfg.width = 8;
  cfg.time_dim = 16;
  cfg.code_dim = 6;
  cfg.zero_init_output = false;
  ConvDenoiser<double> den(cfg, rng);
  const auto x = Var<double>::constant(random_tensor({2, 3, 8, 8}, 12));
  const std::vector<int> ts = {3, 9};
  const auto z1 = Var<double>::constant(random_tensor({2, 6}, 13));
  const auto z2 = Var<double>::constant(random_tensor({2, 6}, 14));
  const auto e1 = den.predict_noise(x, std::span<const int>(ts), z1).value();
  const auto e2 = den.predict_noise(x, std::span<const int>(ts), z2).value();
  EXPECT_EQ(e1.shape(), x.shape());
  EXPECT_GT(max_abs_diff(e1, e2), 0.0);
  EXPECT_TRUE(e1 == den.predict_noise(x, std::span<const int>(ts), z1).value());
  auto copy = den.clone();
  EXPECT_TRUE(e1 == copy->predict_noise(x, std::span<const int>(ts), z1).value());
}

TEST(GenerateConditioned, SingleStepClosedForm) {
  DiffAEModel<double> model;
  model.schedule = NoiseSchedule::with_flat_segments({1.0, 0.6});
  model.shape = ImageShape{3, 4, 4};
  Rng rng(2);
  model.encoder = std::make_shared<ConvEncoder<double>>(EncoderConfig{3, 4, 5}, rng);
  model.denoiser = std::make_shared<ZeroDenoiser<double>>();
  const auto noise = random_tensor({3, 4, 4}, 15);
  const auto code = encode_semantic(to_model_space(random_tensor({3, 4, 4}, 16)), model);
  EXPECT_EQ(code.shape(), (Shape{1, 5}));
  const auto out = generate_conditioned(code, noise, model);
  for (std::size_t i = 0; i < noise.size(); ++i) EXPECT_NEAR(out[i], noise[i] / std::sqrt(0.6), 1e-14);
  EXPECT_TRUE(out == generate_conditioned(code, noise, model));
  EXPECT_THROW(generate_conditioned(code, random_tensor({3, 4, 5}, 1), model), InputError);
  EXPECT_THROW(encode_semantic(random_tensor({3, 8, 8}, 1), model), InputError);
}

TEST(TrainDiffAE, SingleEpochContractAndDeterminism) {
  const auto images = synthetic_images(4, 16, 3);
  const auto a = train_diffae(images, tiny_config(1, 11));
  const auto b = train_diffae(images, tiny_config(1, 11));
  EXPECT_EQ(a.step_losses.size(), 1u);
  EXPECT_EQ(a.epoch_losses.size(), 1u);
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i].var.value() == pb[i].var.value()) << pa[i].name;
  EXPECT_THROW(train_diffae(std::vector<Tensor<float>>{}, tiny_config(1, 1)), InputError);
}

TEST(TrainDiffAE, LossHalvesAndReconstructs) {
  const auto images = synthetic_images(32, 16, 4);
  auto cfg = tiny_config(50, 21);
  const auto r = train_diffae(images, cfg);
  ASSERT_EQ(r.epoch_losses.size(), 50u);
  EXPECT_LT(r.epoch_losses.back(), 0.5 * r.epoch_losses.front());

  // Reconstruction through the full deterministic encode/decode loop.
  double plateau = 0;
  for (int e = 45; e < 50; ++e) plateau += r.epoch_losses[static_cast<std::size_t>(e)] / 5;
  double recon = 0;
  for (int i = 0; i < 4; ++i) {
    const auto x = to_model_space(images[static_cast<std::size_t>(i)]);
    const auto code = encode_semantic(x, r.model);
    const auto xT = stochastic_encode(x, code, r.model);
    const auto back = generate_conditioned(code, xT, r.model);
    double se = 0;
    for (std::size_t k = 0; k < x.size(); ++k) se += std::pow(double(back[k]) - x[k], 2);
    recon += se / x.size() / 4;
  }
  EXPECT_LT(recon, plateau);

  // Distinct images get distinct codes.
  const auto z0 = encode_semantic(to_model_space(images[0]), r.model);
  const auto z1 = encode_semantic(to_model_space(images[1]), r.model);
  double dot = 0, n0 = 0, n1 = 0;
  for (std::size_t k = 0; k < z0.size(); ++k) dot += z0[k] * z1[k], n0 += z0[k] * z0[k], n1 += z1[k] * z1[k];
  EXPECT_LT(dot / std::sqrt(n0 * n1), 1.0 - 1e-6);
}

TEST(DiffAECheckpoint, RoundTripPreservesParametersAndHash) {
  const auto images = synthetic_images(4, 16, 5);
  const auto r = train_diffae(images, tiny_config(1, 31));
  const auto path = (std::filesystem::temp_directory_path() / "stylseg_diffae_roundtrip.json").string();
  save_diffae(r.model, path);
  const auto loaded = load_diffae<float>(path);
  EXPECT_EQ(diffae_content_hash(loaded), diffae_content_hash(r.model));
  const auto pa = r.model.parameters(), pb = loaded.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i].var.value() == pb[i].var.value());
  EXPECT_EQ(loaded.schedule.table(), r.model.schedule.table());

  write_text_file(path, R"({"format":"something.else","version":1})");
  EXPECT_THROW(load_diffae<float>(path), InputError);
  std::filesystem::remove(path);
}
