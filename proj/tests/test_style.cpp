#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "stylseg/data/synthetic.hpp"
#include "stylseg/style/style.hpp"

using namespace stylseg;
using stylseg::testing::gradcheck;

namespace {

Tensor<double> randn(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return normal_tensor<double>(std::move(shape), rng, sd);
}

Tensor<double> rand01(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_tensor<double>(std::move(shape), rng, 0.0, 1.0);
}

// Tiny double-precision DiffAE with an untrained but non-trivial denoiser.
template <typename T>
DiffAEModel<T> tiny_model(int size, int steps, std::uint64_t seed) {
  Rng rng(seed);
  DiffAEModel<T> m;
  m.schedule = NoiseSchedule::linear_beta(steps, 1e-3, 0.05);
  m.shape = ImageShape{3, size, size};
  m.encoder = std::make_shared<ConvEncoder<T>>(EncoderConfig{3, 4, 6}, rng);
  DenoiserConfig dc;
  dc.width = 4;
  dc.time_dim = 8;
  dc.code_dim = 6;
  dc.zero_init_output = false;
  m.denoiser = std::make_shared<ConvDenoiser<T>>(dc, rng);
  return m;
}

DiffAEModel<double> constant_model(int size, std::uint64_t seed) {
  Rng rng(seed);
  DiffAEModel<double> m;
  m.schedule = NoiseSchedule::linear_beta(20);
  m.shape = ImageShape{3, size, size};
  m.encoder = std::make_shared<ConvEncoder<double>>(EncoderConfig{3, 4, 6}, rng);
  m.denoiser = std::make_shared<ConstantDenoiser<double>>(randn({1, 3, size, size}, seed + 1));
  return m;
}

StyleConfig small_style(int t1, int t2, int n) {
  StyleConfig c;
  c.T1 = t1;
  c.T2 = t2;
  c.n = n;
  c.learning_rate = 1e-2;
  c.seed = 4;
  return c;
}

Var<double> var(const Tensor<double>& t) { return Var<double>::constant(t); }

void randomize_spn(SPNParams<double>& spn, std::uint64_t seed) {
  spn.weight.mutable_value() = randn(spn.weight.shape(), seed, 0.1);
  spn.bias.mutable_value() = randn(spn.bias.shape(), seed + 1, 0.1);
}

}  // namespace

// ---------------------------------------------------------------------------
// SPN

TEST(Spn, ApplyBasics) {
  auto p = zero_spn<double>(3, 1, 10);
  const auto img = randn({2, 3, 4, 5}, 1);
  const auto zero = spn_apply(img, p);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);

  // Identity kernel reproduces the image.
  auto& w = p.weight.mutable_value();
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  EXPECT_LT(max_abs_diff(spn_apply(img, p), img), 1e-15);

  // Literal per-pixel formula with bias.
  p.weight.mutable_value() = randn({3, 3}, 2);
  p.bias.mutable_value() = randn({3}, 3);
  const auto out = spn_apply(img, p);
  double worst = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
          double v = p.bias.value()[c];
          for (int k = 0; k < 3; ++k) v += p.weight.value()[c * 3 + k] * img.at(n, k, y, x);
          worst = std::max(worst, std::abs(v - out.at(n, c, y, x)));
        }
  EXPECT_LT(worst, 1e-12);
}

TEST(Spn, LinearityWithoutBias) {
  auto p = zero_spn<double>(3, 1, 5);
  p.weight.mutable_value() = randn({3, 3}, 4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = randn({1, 3, 4, 4}, 10 + s), b = randn({1, 3, 4, 4}, 20 + s);
    Tensor<double> sum(a.shape()), twice(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) sum[i] = a[i] + b[i], twice[i] = 2 * a[i];
    const auto fa = spn_apply(a, p), fb = spn_apply(b, p);
    Tensor<double> fsum(a.shape()), f2(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) fsum[i] = fa[i] + fb[i], f2[i] = 2 * fa[i];
    EXPECT_LT(max_abs_diff(spn_apply(sum, p), fsum), 1e-10);
    EXPECT_LT(max_abs_diff(spn_apply(twice, p), f2), 1e-10);
  }
}

TEST(Spn, ChannelMismatchAndWindowValidation) {
  const auto p = zero_spn<double>(3, 1, 5);
  EXPECT_THROW(spn_apply(randn({1, 2, 4, 4}, 1), p), InputError);
  EXPECT_THROW(zero_spn<double>(3, 0, 5).validate(10), InputError);
  EXPECT_THROW(zero_spn<double>(3, 4, 3).validate(10), InputError);
  EXPECT_THROW(zero_spn<double>(3, 1, 11).validate(10), InputError);
  EXPECT_NO_THROW(p.validate(5));
}

TEST(Spn, Inject) {
  const auto p = zero_spn<double>(1, 3, 6);
  const LatentState<double> s{var(Tensor<double>({1, 1, 1, 2}, std::vector<double>{1.0, 2.0})), 5};
  const auto corr = var(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.5, -0.5}));
  const auto in = inject(s, corr, 5, p);
  EXPECT_EQ(in.x.value().values()[0], 1.5);
  EXPECT_EQ(in.x.value().values()[1], 1.5);
  EXPECT_EQ(in.t, 5);
  const auto out = inject(s, corr, 7, p);
  EXPECT_TRUE(out.x.value() == s.x.value());
  const auto zero = inject(s, var(Tensor<double>({1, 1, 1, 2})), 5, p);
  EXPECT_TRUE(zero.x.value() == s.x.value());
  EXPECT_THROW(inject(s, var(Tensor<double>({1, 1, 2, 1})), 5, p), InputError);
}

TEST(Spn, LossExamples) {
  auto p = zero_spn<double>(3, 1, 5);
  randomize_spn(p, 5);
  const auto ref = var(randn({1, 3, 4, 4}, 6));
  const auto out = spn_apply(ref, p);
  EXPECT_EQ(spn_loss(p, ref, {out.detach(), out.detach()}).item(), 0.0);

  // Zero params against unit-norm targets: mean of the norms, i.e. 1.
  const auto zp = zero_spn<double>(3, 1, 5);
  std::vector<Var<double>> unit;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto t = randn({1, 3, 4, 4}, 30 + s);
    double n = 0;
    for (double v : t.values()) n += v * v;
    for (auto& v : t.storage()) v /= std::sqrt(n);
    unit.push_back(var(t));
  }
  EXPECT_NEAR(spn_loss(zp, ref, unit).item(), 1.0, 1e-12);

  // Homogeneity: doubling both sides doubles the loss.
  std::vector<Var<double>> targets, doubled;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto t = randn({1, 3, 4, 4}, 40 + s);
    Tensor<double> t2 = t;
    for (auto& v : t2.storage()) v *= 2;
    targets.push_back(var(t));
    doubled.push_back(var(t2));
  }
  auto p2 = p;
  p2.weight = var(p.weight.value());
  p2.bias = var(p.bias.value());
  for (auto& v : p2.bias.mutable_value().storage()) v *= 2;
  Tensor<double> ref_scaled = ref.value();
  // SPN(2x) with doubled bias equals 2 SPN(x).
  for (auto& v : ref_scaled.storage()) v *= 2;
  EXPECT_NEAR(spn_loss(p2, var(ref_scaled), doubled).item(), 2 * spn_loss(p, ref, targets).item(), 1e-12);

  EXPECT_THROW(spn_loss(p, ref, {}), InputError);
  EXPECT_THROW(spn_loss(p, ref, {var(randn({1, 3, 4, 5}, 1))}), InputError);
}

TEST(Spn, LossGradientMatchesFiniteDifferences) {
  auto p = zero_spn<double>(3, 1, 5);
  randomize_spn(p, 7);
  const auto ref = var(randn({1, 3, 4, 4}, 8));
  std::vector<Var<double>> targets;
  for (std::uint64_t s = 0; s < 4; ++s) targets.push_back(var(randn({1, 3, 4, 4}, 50 + s)));
  auto loss = [&] { return spn_loss(p, ref, targets); };
  EXPECT_LT(gradcheck(loss, {p.weight, p.bias}).max_relative_error, 1e-4);
}

// ---------------------------------------------------------------------------
// Loss algebra

TEST(AdvLoss, Endpoints) {
  auto e = [](int k) {
    Tensor<double> t({1, 4});
    t[static_cast<std::size_t>(k)] = 1.0;
    return var(t);
  };
  EXPECT_NEAR(adv_loss(e(0), e(1), e(0), e(1)).item(), 0.0, 1e-9);
  EXPECT_NEAR(adv_loss(e(0), e(1), e(1), e(0)).item(), 2.0, 1e-9);
  EXPECT_NEAR(adv_loss(e(0), e(1), e(2), e(3)).item(), 1.0, 1e-9);

  int warnings = 0;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string&) { ++warnings; };
  EXPECT_EQ(adv_loss(e(0), e(0), e(2), e(3)).item(), 1.0);
  warning_sink() = saved;
  EXPECT_EQ(warnings, 1);

  Tensor<double> not_unit({1, 4}, 1.0);
  EXPECT_THROW(adv_loss(var(not_unit), e(1), e(2), e(3)), InputError);
}

TEST(TotalStyleLoss, ExactWeightedSum) {
  auto s = [](double v) { return var(Tensor<double>({1}, v)); };
  StyleConfig c;
  c.lambda1 = c.lambda2 = c.lambda3 = 0;
  EXPECT_EQ(total_style_loss(s(0.3), s(0.2), s(0.1), c).record.total, 0.0);
  c.lambda1 = 1;
  EXPECT_EQ(total_style_loss(s(0.7), s(0.2), s(0.1), c).record.total, 0.7);
  c.lambda2 = 2, c.lambda3 = 3;
  EXPECT_NEAR(total_style_loss(s(0.1), s(0.2), s(0.3), c).record.total, 1.4, 1e-15);

  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int k = 0; k < 3; ++k) {
    c.lambda1 = u(rng), c.lambda2 = u(rng), c.lambda3 = u(rng);
    const double a = u(rng), b = u(rng), d = u(rng);
    const auto r = total_style_loss(s(a), s(b), s(d), c);
    EXPECT_EQ(r.record.total, c.lambda1 * a + c.lambda2 * b + c.lambda3 * d);
    EXPECT_EQ(r.record.adv, a);
    EXPECT_EQ(r.record.cycle, b);
    EXPECT_EQ(r.record.spn, d);
  }
  EXPECT_THROW(total_style_loss(s(-0.1), s(0.2), s(0.3), c), std::logic_error);
}

// ---------------------------------------------------------------------------
// Mapper passes

TEST(StyleMapper, IdentityConfigurationRoundTrips) {
  const auto model = constant_model(8, 9);
  const auto x = rand01({3, 8, 8}, 10);
  const auto code = encode_semantic(to_model_space(x), model);
  const auto m = make_style_mapper(model, code, small_style(12, 12, 1));
  EXPECT_LE(max_abs_diff(stylize(x, m), x), 1e-5);
  EXPECT_TRUE(stylize(x, m) == stylize(x, m));

  const auto xm = var(batch_of_one(to_model_space(x)));
  const auto y = var(batch_of_one(to_model_space(rand01({3, 8, 8}, 11))));
  EXPECT_LE(cycle_loss(m, xm, y).item(), 1e-6);
  EXPECT_THROW(stylize(rand01({3, 8, 4}, 1), m), InputError);
}

TEST(StyleMapper, CycleLossIsSumOfRoundTrips) {
  const auto model = tiny_model<double>(8, 10, 12);
  auto m = make_style_mapper(model, randn({1, 6}, 13), small_style(4, 3, 1));
  randomize_spn(m.spn, 14);
  const auto x = var(randn({1, 3, 8, 8}, 15, 0.5)), y = var(randn({1, 3, 8, 8}, 16, 0.5));
  const auto gx = map_to_target(m, x);
  const auto fy = map_to_source(m, y);
  const double t1 = mean_abs_diff(map_to_target(m, map_to_source(m, gx)), gx).item();
  const double t2 = mean_abs_diff(map_to_source(m, map_to_target(m, fy)), fy).item();
  EXPECT_NEAR(cycle_loss(m, x, y).item(), t1 + t2, 1e-14);
  EXPECT_GE(cycle_loss(m, x, y).item(), 0.0);
}

TEST(StyleMapper, ZeroSpnMatchesDisabledSpnBitwise) {
  const auto model = tiny_model<double>(8, 10, 17);
  const auto m = make_style_mapper(model, randn({1, 6}, 18), small_style(6, 6, 1));
  const auto x = var(randn({2, 3, 8, 8}, 19, 0.5));
  EXPECT_TRUE(map_to_target(m, x, true).value() == map_to_target(m, x, false).value());
}

TEST(StyleMapper, OutputShapeAndAnyInput) {
  const auto model = tiny_model<float>(8, 10, 20);
  Rng rng(1);
  const auto m = make_style_mapper(model, normal_tensor<float>({1, 6}, rng), small_style(5, 3, 1));
  const auto img = uniform_tensor<float>({3, 8, 8}, rng, 0, 1);
  const auto out = stylize(img, m);
  EXPECT_EQ(out.shape(), img.shape());
  EXPECT_TRUE(out.all_finite());
}

TEST(StyleConfigValidation, RejectsBadSettings) {
  const auto model = tiny_model<double>(8, 10, 21);
  auto bad = small_style(4, 5, 1);
  EXPECT_THROW(make_style_mapper(model, randn({1, 6}, 1), bad), InputError);
  bad = small_style(11, 5, 1);
  EXPECT_THROW(make_style_mapper(model, randn({1, 6}, 1), bad), InputError);
  bad = small_style(4, 4, 0);
  EXPECT_THROW(make_style_mapper(model, randn({1, 6}, 1), bad), InputError);
  bad = small_style(4, 4, 1);
  bad.lambda2 = -1;
  EXPECT_THROW(make_style_mapper(model, randn({1, 6}, 1), bad), InputError);
  EXPECT_THROW(make_style_mapper(model, randn({1, 5}, 1), small_style(4, 4, 1)), InputError);
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainStyle, GradientsOfTotalLossMatchFiniteDifferences) {
  const auto model = tiny_model<double>(8, 10, 22);
  Rng rng(23);
  const ConvEmbedder<double> embedder(EncoderConfig{3, 4, 5}, rng);
  auto cfg = small_style(3, 3, 1);
  cfg.lambda1 = 0.7, cfg.lambda2 = 1.3, cfg.lambda3 = 0.4;
  auto m = make_style_mapper(model, randn({1, 6}, 24), cfg);
  randomize_spn(m.spn, 25);
  set_trainable(m.trainable(), true);
  const auto x_in = var(randn({1, 3, 8, 8}, 26, 0.5));
  const auto x_style = var(randn({1, 3, 8, 8}, 27, 0.5));
  const auto y = var(randn({1, 3, 8, 8}, 28, 0.5));
  auto loss = [&] { return style_objective(m, embedder, x_in, x_style, y).total; };
  const auto r = gradcheck(loss, {m.target_code, m.spn.weight, m.spn.bias});
  EXPECT_LT(r.max_relative_error, 1e-4) << "abs " << r.max_abs_error;
  EXPECT_GT(r.checked, 10u);
}

TEST(TrainStyle, SingleIterationFreezesSourceAndIsDeterministic) {
  const auto model = tiny_model<double>(8, 10, 29);
  Rng rng(30);
  const ConvEmbedder<double> embedder(EncoderConfig{3, 4, 5}, rng);
  const auto x = rand01({3, 8, 8}, 31), y = rand01({3, 8, 8}, 32);
  const auto before = params_to_json(model.parameters()).dump();
  const auto a = train_style_mapper(x, y, model, embedder, small_style(3, 3, 1));
  EXPECT_EQ(a.history.size(), 1u);
  EXPECT_EQ(params_to_json(model.parameters()).dump(), before);
  const auto b = train_style_mapper(x, y, model, embedder, small_style(3, 3, 1));
  EXPECT_EQ(style_mapper_to_json(a).dump(), style_mapper_to_json(b).dump());
  EXPECT_THROW(train_style_mapper(rand01({3, 4, 4}, 1), y, model, embedder, small_style(3, 3, 1)), InputError);
}

TEST(TrainStyle, CheckpointRoundTrip) {
  const auto model = tiny_model<double>(8, 10, 33);
  Rng rng(34);
  const ConvEmbedder<double> embedder(EncoderConfig{3, 4, 5}, rng);
  const auto x = rand01({3, 8, 8}, 35), y = rand01({3, 8, 8}, 36);
  const auto m = train_style_mapper(x, y, model, embedder, small_style(3, 2, 2));
  const auto j = style_mapper_to_json(m);
  const auto back = style_mapper_from_json(j, model);
  EXPECT_EQ(style_mapper_to_json(back).dump(), j.dump());
  EXPECT_TRUE(stylize(x, back) == stylize(x, m));
  const auto other = tiny_model<double>(8, 10, 99);
  EXPECT_THROW(style_mapper_from_json(j, other), InputError);
}

TEST(TrainStyle, LossDecreasesOnSyntheticPair) {
  SynthConfig sc;
  sc.count = 1;
  sc.image_size = 16;
  sc.seed = 2;
  const auto [src, tgt] = generate_synthetic(sc);
  const auto model = tiny_model<float>(16, 10, 37);
  Rng rng(38);
  const ConvEmbedder<float> embedder(EncoderConfig{3, 4, 8}, rng);
  auto cfg = small_style(4, 4, 200);
  cfg.lambda3 = 0.05;
  const auto m = train_style_mapper(src[0].image, tgt[0].image, model, embedder, cfg);
  ASSERT_EQ(m.history.size(), 200u);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) first += m.history[static_cast<std::size_t>(i)].total / 10;
  for (int i = 190; i < 200; ++i) last += m.history[static_cast<std::size_t>(i)].total / 10;
  EXPECT_LT(last, first);
}
