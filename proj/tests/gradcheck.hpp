#pragma once

// Random small instances for central-difference gradient checks; shared by
// the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tabvla/defense.hpp"
#include "tabvla/policy.hpp"

namespace tabvla::gradcheck {

inline constexpr double kStep = 1e-5;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

inline ActionBins random_bins(Rng& rng, int bins) {
  std::array<std::vector<float>, kActionDim> values;
  for (auto& v : values)
    for (int i = 0; i < 50; ++i) v.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  return ActionBins::fit(values, bins);
}

inline PolicyShape tiny_shape(Rng& rng, int image_features, int vocab) {
  PolicyShape s;
  s.image_features = image_features;
  s.vocab = vocab;
  s.horizon_k = 1 + static_cast<int>(rng.below(3));
  s.bins = 2 + static_cast<int>(rng.below(4));
  s.image_embed = 2 + static_cast<int>(rng.below(5));
  s.text_embed = 1 + static_cast<int>(rng.below(3));
  s.hidden = 2 + static_cast<int>(rng.below(5));
  return s;
}

// Zero-initialised biases can leave a ReLU pre-activation exactly at 0 (a
// dead first layer feeds b2 straight through), where central differences see
// half the slope. Random biases keep the check at a differentiable point.
inline void randomize_biases(Rng& rng, PolicyParamsT<double>& p) {
  for (auto* b : {&p.b_img, &p.b_txt, &p.b1, &p.b2, &p.b_out})
    for (Eigen::Index i = 0; i < b->size(); ++i) (*b)(i) = rng.uniform(-0.5, 0.5);
}

/// Max relative error of the bc_loss gradient over every parameter.
inline double bc_loss_error(std::uint64_t seed, double ce_weight) {
  Rng rng(seed);
  const auto shape = tiny_shape(rng, 6 + static_cast<int>(rng.below(10)), 2 + static_cast<int>(rng.below(4)));
  auto p = init_params(shape, seed).cast<double>();
  randomize_biases(rng, p);
  const auto bins = random_bins(rng, shape.bins);
  const int n = 1 + static_cast<int>(rng.below(4));
  MatX<double> x_img(shape.image_features, n), x_txt(shape.vocab, n), y(shape.horizon_k * kActionDim, n);
  for (Eigen::Index i = 0; i < x_img.size(); ++i) x_img.data()[i] = rng.uniform();
  for (Eigen::Index i = 0; i < x_txt.size(); ++i) x_txt.data()[i] = rng.uniform();
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform(-1.0, 1.0);
  const double temperature = rng.uniform(0.5, 2.0);

  PolicyParamsT<double> grad;
  bc_loss<double>(p, bins, x_img, x_txt, y, &grad, temperature, ce_weight);
  std::vector<double*> params, grads;
  p.for_each_tensor([&](const char*, double* d, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index i = 0; i < r * c; ++i) params.push_back(d + i);
  });
  grad.for_each_tensor([&](const char*, double* d, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index i = 0; i < r * c; ++i) grads.push_back(d + i);
  });
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = *params[i];
    *params[i] = orig + kStep;
    const double up = bc_loss<double>(p, bins, x_img, x_txt, y, nullptr, temperature, ce_weight);
    *params[i] = orig - kStep;
    const double down = bc_loss<double>(p, bins, x_img, x_txt, y, nullptr, temperature, ce_weight);
    *params[i] = orig;
    worst = std::max(worst, relative_error(*grads[i], (up - down) / (2 * kStep)));
  }
  return worst;
}

/// Max relative error of dL/dtheta for the inversion objective.
inline double inversion_error(std::uint64_t seed, bool self_divergence) {
  Rng rng(seed);
  const int h = 2 * (1 + static_cast<int>(rng.below(3))), w = 2 * (1 + static_cast<int>(rng.below(3)));
  const Vocabulary vocab({"<unk>", "a", "b", "c"});
  const auto shape = tiny_shape(rng, image_feature_count(h, w), 4);
  auto suspect = init_params(shape, seed).cast<double>();
  auto reference = init_params(shape, seed + 1000).cast<double>();
  randomize_biases(rng, suspect);
  randomize_biases(rng, reference);
  const auto bins = random_bins(rng, shape.bins);
  std::vector<Probe> probes(1 + rng.below(3));
  for (auto& pr : probes) {
    pr.instruction = rng.below(2) ? "a b" : "c a a";
    pr.image_main = Image(h, w);
    pr.image_wrist = Image(h, w);
    for (auto& x : pr.image_main.data) x = static_cast<std::uint8_t>(rng.below(256));
    for (auto& x : pr.image_wrist.data) x = static_cast<std::uint8_t>(rng.below(256));
  }
  InversionConfig cfg;
  cfg.lambda_cov = rng.uniform(0.0, 1.0);
  cfg.lambda_amp = rng.uniform(0.0, 0.5);
  cfg.lambda_disp = rng.uniform(0.0, 0.1);
  cfg.temperature = rng.uniform(0.5, 2.0);
  cfg.self_divergence = self_divergence;
  cfg.mask.resize(static_cast<std::size_t>(h) * w * 3);
  for (auto& m : cfg.mask) m = rng.uniform() < 0.8;
  const InversionObjective obj(suspect, bins, vocab, reference, bins, vocab, h, w, probes, cfg);

  std::vector<double> theta(obj.size());
  for (auto& t : theta) t = 0.7 * rng.normal();
  std::vector<double> grad;
  obj.evaluate(theta, &grad);
  double worst = 0.0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double orig = theta[k];
    theta[k] = orig + kStep;
    const double up = obj.evaluate(theta).loss;
    theta[k] = orig - kStep;
    const double down = obj.evaluate(theta).loss;
    theta[k] = orig;
    worst = std::max(worst, relative_error(grad[k], (up - down) / (2 * kStep)));
  }
  return worst;
}

/// Largest |soft - hard| at temperature 1e-3 on logits whose top two bins
/// differ by at least 0.05. The gripper dimension is compared before the
/// sign threshold that decode_hard applies.
inline double soft_hard_gap(std::uint64_t seed) {
  Rng rng(seed);
  const int k = 1 + static_cast<int>(rng.below(4)), nb = 2 + static_cast<int>(rng.below(15));
  const auto bins = random_bins(rng, nb);
  std::vector<float> logits(static_cast<std::size_t>(k) * kActionDim * nb);
  for (std::size_t g = 0; g < logits.size(); g += nb) {
    // distinct levels spaced >= 0.05 apart, shuffled
    std::vector<float> levels(nb);
    for (int b = 0; b < nb; ++b) levels[b] = static_cast<float>(0.05 * b + 0.01 * rng.uniform());
    rng.shuffle(levels);
    std::copy(levels.begin(), levels.end(), logits.begin() + static_cast<std::ptrdiff_t>(g));
  }
  const auto soft = decode_soft(logits, bins, k, 1e-3);
  const auto hard = decode_hard(logits, bins, k);
  double gap = 0.0;
  for (int s = 0; s < k; ++s)
    for (int j = 0; j < kActionDim; ++j) {
      const float* z = logits.data() + (static_cast<std::size_t>(s) * kActionDim + j) * nb;
      const int arg = static_cast<int>(std::max_element(z, z + nb) - z);
      const double want = bins.centers[j][arg];
      gap = std::max(gap, std::abs(soft[s][j] - want));
      if (j == kGripperDim && (want > 0.0 ? 1.0 : -1.0) != hard[s][j]) gap = 1.0;
      if (j != kGripperDim && hard[s][j] != want) gap = 1.0;
    }
  return gap;
}

}  // namespace tabvla::gradcheck
