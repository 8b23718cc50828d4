#include <fstream>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tabvla/defense.hpp"
#include "test_util.hpp"

using namespace tabvla;
using tabvla::testing::random_image;
using tabvla::testing::TempDir;

namespace {

TrainedPolicy random_trained(int h, int w, std::uint64_t seed) {
  TrainedPolicy p;
  p.height = h;
  p.width = w;
  p.vocab = base_vocabulary();
  PolicyShape s;
  s.image_features = image_feature_count(h, w);
  s.vocab = static_cast<int>(p.vocab.size());
  s.image_embed = 8;
  s.hidden = 8;
  s.horizon_k = 2;
  s.bins = 4;
  p.params = init_params(s, seed);
  Rng rng(seed);
  p.bins = gradcheck::random_bins(rng, s.bins);
  return p;
}

std::vector<Probe> random_probes(Rng& rng, int count, int h, int w) {
  std::vector<Probe> probes;
  for (int i = 0; i < count; ++i)
    probes.push_back({task_suite()[i % 3].instruction, random_image(rng, h, w), random_image(rng, h, w)});
  return probes;
}

}  // namespace

TEST(SigmaSpace, Endpoints) {
  Image im(1, 1, {255, 0, 128});
  const auto x = normalize(im);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], -1.0);
  EXPECT_NEAR(x[2], (128.0 / 255.0 - 0.5) / 0.5, 1e-15);
}

TEST(SigmaSpace, RoundTripWithinQuantization) {
  Rng rng(1);
  const auto im = random_image(rng, 6, 6);
  EXPECT_EQ(denormalize(normalize(im), 6, 6), im);
  std::vector<double> x(6 * 6 * 3);
  for (auto& v : x) v = rng.uniform(-1, 1);
  const auto back = normalize(denormalize(x, 6, 6));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(back[i] - x[i]) * 0.5, 0.5 / 255.0 + 1e-12);
  EXPECT_THROW(denormalize(x, 5, 6), std::invalid_argument);
}

TEST(Perturb, ZeroThetaIsIdentity) {
  Rng rng(2);
  std::vector<double> x(48), theta(48, 0.0);
  for (auto& v : x) v = rng.uniform(-1, 1);
  EXPECT_EQ(perturb(x, theta, std::vector<std::uint8_t>(48, 1)), x);
}

TEST(Perturb, ZeroMaskIsIdentity) {
  Rng rng(3);
  std::vector<double> x(48), theta(48);
  for (auto& v : x) v = rng.uniform(-1, 1);
  for (auto& t : theta) t = 5 * rng.normal();
  EXPECT_EQ(perturb(x, theta, std::vector<std::uint8_t>(48, 0)), x);
}

TEST(Perturb, SaturatesAtOne) {
  const std::vector<double> x(3, 0.0), theta = {40.0, -40.0, 15.0};
  const auto out = perturb(x, theta, std::vector<std::uint8_t>(3, 1));
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], -1.0);
  EXPECT_LT(out[2], 1.0);  // the clip value keeps Delta strictly inside
  EXPECT_THROW(perturb(x, std::vector<double>(2), std::vector<std::uint8_t>(3, 1)), std::invalid_argument);
}

TEST(RectMask, CoversRequestedBlock) {
  const auto m = rect_mask(8, 8, 0, 0, 4, 2);
  int n = 0;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const bool on = m[(r * 8 + c) * 3 + ch];
        EXPECT_EQ(on, r < 4 && c < 2);
        n += on;
      }
  EXPECT_EQ(n, 24);
}

TEST(Divergence, Examples) {
  const std::vector<double> a = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  EXPECT_EQ(divergence(a, a), 0.0);
  std::vector<double> b = a;
  b[0] += 1.0;
  EXPECT_NEAR(divergence(a, b), 1.0 / 7.0, 1e-15);
  EXPECT_THROW(divergence(a, std::vector<double>(3)), std::invalid_argument);
}

TEST(Divergence, SymmetricNonNegativeMatchesLoop) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(7), b(7);
    for (auto& v : a) v = rng.uniform(-1, 1);
    for (auto& v : b) v = rng.uniform(-1, 1);
    double s = 0;
    for (int j = 0; j < 7; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    EXPECT_NEAR(divergence(a, b), s / 7.0, 1e-15);
    EXPECT_EQ(divergence(a, b), divergence(b, a));
    EXPECT_GE(divergence(a, b), 0.0);
  }
}

TEST(Regularizers, ZeroDelta) {
  const auto r = regularizers(std::vector<double>(48, 0.0), std::vector<std::uint8_t>(48, 1), 4, 4);
  EXPECT_EQ(r.cov, 0.0);
  EXPECT_EQ(r.amp, 0.0);
  EXPECT_EQ(r.disp, 0.0);
}

TEST(Regularizers, SinglePixel) {
  std::vector<double> d(48, 0.0);
  d[(2 * 4 + 1) * 3 + 1] = -0.5;
  const auto r = regularizers(d, std::vector<std::uint8_t>(48, 1), 4, 4);
  EXPECT_EQ(r.amp, 0.5);
  EXPECT_EQ(r.disp, 0.0);
  EXPECT_DOUBLE_EQ(r.cov, 0.5 / 48.0);
}

TEST(Regularizers, TwoPointMasses) {
  // two equal masses two pixels apart along a row: variance 1 about the midpoint
  std::vector<double> d(8 * 8 * 3, 0.0);
  d[(3 * 8 + 2) * 3] = 0.5;
  d[(3 * 8 + 4) * 3] = 0.5;
  EXPECT_DOUBLE_EQ(regularizers(d, std::vector<std::uint8_t>(d.size(), 1), 8, 8).disp, 1.0);
  // and along a diagonal: one per axis
  std::fill(d.begin(), d.end(), 0.0);
  d[(1 * 8 + 1) * 3 + 2] = 0.5;
  d[(3 * 8 + 3) * 3 + 2] = -0.5;
  EXPECT_DOUBLE_EQ(regularizers(d, std::vector<std::uint8_t>(d.size(), 1), 8, 8).disp, 2.0);
}

TEST(Regularizers, CoverageAveragesMaskedEntries) {
  std::vector<double> d(12, 0.25);
  std::vector<std::uint8_t> m(12, 0);
  m[0] = m[5] = 1;
  d[5] = -0.75;
  EXPECT_DOUBLE_EQ(regularizers(d, m, 2, 2).cov, 0.5);
}

TEST(DifferentiableFeatures, MatchUint8Path) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto main = random_image(rng, 8, 8), wrist = random_image(rng, 8, 8);
    if (trial % 4 == 0) std::fill(main.data.begin(), main.data.end(), 0);  // all-zero channels
    if (trial % 4 == 1)
      for (std::size_t i = 0; i < wrist.data.size(); ++i) wrist.data[i] = i == 7 ? 1 : 0;  // smallest nonzero
    std::vector<double> m01(main.data.size()), w01(wrist.data.size());
    for (std::size_t i = 0; i < m01.size(); ++i) {
      m01[i] = main.data[i] / 255.0;
      w01[i] = wrist.data[i] / 255.0;
    }
    std::vector<double> d(image_feature_count(8, 8));
    std::vector<float> f(d.size());
    image_features_from_pixels(m01, w01, 8, 8, d.data());
    featurize_images(main, wrist, f.data());
    for (std::size_t i = 0; i < d.size(); ++i) ASSERT_NEAR(d[i], f[i], 1e-6) << i;
  }
}

TEST(InversionLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LE(gradcheck::inversion_error(seed, false), 1e-4) << "seed " << seed;
    EXPECT_LE(gradcheck::inversion_error(500 + seed, true), 1e-4) << "seed " << seed;
  }
}

TEST(Invert, IdenticalPoliciesGiveZeroDivergence) {
  Rng rng(6);
  const auto p = random_trained(8, 8, 1);
  const auto probes = random_probes(rng, 3, 8, 8);
  InversionConfig cfg;
  cfg.iterations = 15;
  cfg.step = 1.0;
  const auto r = invert(p, p, probes, cfg);
  EXPECT_LE(r.d_best, 1e-6);
}

TEST(Invert, BestSoFarMonotoneAndBounded) {
  Rng rng(7);
  const auto s = random_trained(8, 8, 3), ref = random_trained(8, 8, 4);
  const auto probes = random_probes(rng, 2, 8, 8);
  InversionConfig cfg;
  cfg.iterations = 30;
  cfg.step = 5.0;  // large steps push theta into the clip
  cfg.mask = rect_mask(8, 8, 0, 0, 4, 4);
  const auto r = invert(s, ref, probes, cfg);
  ASSERT_EQ(r.d_trajectory.size(), 30u);
  for (std::size_t i = 1; i < r.d_best_trajectory.size(); ++i)
    EXPECT_GE(r.d_best_trajectory[i], r.d_best_trajectory[i - 1]);
  EXPECT_EQ(r.d_best, r.d_best_trajectory.back());
  EXPECT_EQ(r.d_trajectory[r.best_iteration], r.d_best);
  for (std::size_t k = 0; k < r.delta.size(); ++k) {
    EXPECT_LT(std::abs(r.delta[k]), 1.0);
    if (!cfg.mask[k]) EXPECT_EQ(r.delta[k], 0.0);
  }
  EXPECT_EQ(r.probe_count, 2u);
}

TEST(Invert, DeterministicPerSeed) {
  Rng rng(8);
  const auto s = random_trained(8, 8, 5), ref = random_trained(8, 8, 6);
  const auto probes = random_probes(rng, 2, 8, 8);
  InversionConfig cfg;
  cfg.iterations = 5;
  cfg.seed = 3;
  const auto a = invert(s, ref, probes, cfg), b = invert(s, ref, probes, cfg);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.d_trajectory, b.d_trajectory);
}

TEST(Invert, DescentIncreasesDivergence) {
  Rng rng(9);
  const auto s = random_trained(8, 8, 7), ref = random_trained(8, 8, 8);
  const auto probes = random_probes(rng, 2, 8, 8);
  InversionConfig cfg;
  cfg.iterations = 40;
  cfg.lambda_cov = cfg.lambda_disp = 0.0;
  const auto r = invert(s, ref, probes, cfg);
  EXPECT_GT(r.d_best, r.d_trajectory.front());
}

TEST(InversionConfig, Validation) {
  InversionConfig c;
  EXPECT_NO_THROW(c.validate(4, 4));
  c.mask = std::vector<std::uint8_t>(5, 1);
  EXPECT_THROW(c.validate(4, 4), ConfigError);
  c = {};
  c.lambda_cov = -1;
  EXPECT_THROW(c.validate(4, 4), ConfigError);
  c = {};
  c.theta_clip = 20;
  EXPECT_THROW(c.validate(4, 4), ConfigError);
}

TEST(Detect, RatioThreshold) {
  InversionResult clean, strong, control;
  control.d_best = 0.01;
  clean.d_best = 0.01;
  strong.d_best = 0.5;
  EXPECT_FALSE(detect(clean, control, 10.0));
  EXPECT_TRUE(detect(strong, control, 10.0));
  EXPECT_DOUBLE_EQ(detection_ratio(strong, control), 50.0);
  control.d_best = 0.0;
  EXPECT_DOUBLE_EQ(detection_ratio(strong, control), 0.5 / kDetectEpsilon);
}

TEST(Detect, RocTable) {
  const auto roc = roc_table({1.0, 50.0, 5.0}, {false, true, true}, {2.0, 10.0, 100.0});
  ASSERT_EQ(roc.size(), 3u);
  EXPECT_EQ(roc[0].tpr, 1.0);
  EXPECT_EQ(roc[0].fpr, 0.0);
  EXPECT_EQ(roc[1].tpr, 0.5);
  EXPECT_EQ(roc[2].tpr, 0.0);
  EXPECT_EQ(roc[1].verdicts, (std::vector<bool>{false, true, false}));
  EXPECT_THROW(roc_table({1.0}, {true, false}, {1.0}), std::invalid_argument);
}

TEST(Probes, CarryPhaseAndDeterministic) {
  const auto a = collect_probes(4, 11, 16, 16);
  ASSERT_EQ(a.size(), 4u);
  const auto b = collect_probes(4, 11, 16, 16);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image_main, b[i].image_main);
    EXPECT_EQ(a[i].instruction, task_suite()[i % 3].instruction);
  }
  EXPECT_THROW(collect_probes(0, 1, 16, 16), std::invalid_argument);
}

TEST(Heatmap, WritesPpm) {
  TempDir dir;
  std::vector<double> d(2 * 2 * 3, 0.0);
  d[0] = -1.0;
  d[4] = 0.5;
  write_delta_heatmap(d, 2, 2, dir.path() / "h.ppm", 2);
  std::ifstream in(dir.path() / "h.ppm", std::ios::binary);
  std::string magic;
  int w, h, mx;
  in >> magic >> w >> h >> mx;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 4);
  EXPECT_EQ(h, 4);
  std::vector<unsigned char> px(4 * 4 * 3);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[(0 * 4 + 2) * 3 + 1], 128);
  EXPECT_EQ(px[(1 * 4 + 1) * 3], 255);
}
