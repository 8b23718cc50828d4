#include "tabvla/defense.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace tabvla {

// ---- sigma space ---------------------------------------------------------------

std::vector<double> normalize(const Image& image) {
  std::vector<double> x(image.data.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (image.data[i] / 255.0 - kSigmaMean) / kSigmaStd;
  return x;
}

Image denormalize(std::span<const double> x, int height, int width) {
  Image im(height, width);
  if (x.size() != im.data.size()) throw std::invalid_argument("denormalize: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::round((x[i] * kSigmaStd + kSigmaMean) * 255.0);
    im.data[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return im;
}

std::vector<double> perturb(std::span<const double> x, std::span<const double> theta,
                            std::span<const std::uint8_t> mask) {
  if (theta.size() != x.size() || mask.size() != x.size()) throw std::invalid_argument("perturb: shape mismatch");
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i)
    if (mask[i]) out[i] += std::tanh(theta[i]);
  return out;
}

std::vector<std::uint8_t> rect_mask(int height, int width, int row0, int col0, int row1, int col1) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(height) * width * 3, 0);
  for (int r = std::max(0, row0); r < std::min(height, row1); ++r)
    for (int c = std::max(0, col0); c < std::min(width, col1); ++c)
      for (int ch = 0; ch < 3; ++ch) m[(static_cast<std::size_t>(r) * width + c) * 3 + ch] = 1;
  return m;
}

// ---- differentiable image features -----------------------------------------------

namespace {

constexpr double kNormFloor = 1.0 / 1020.0;

void pool(std::span<const double> im, int height, int width, double* out) {
  const int pw = width / 2;
  for (int r = 0; r < height / 2; ++r)
    for (int c = 0; c < pw; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        auto at = [&](int rr, int cc) { return im[(static_cast<std::size_t>(rr) * width + cc) * 3 + ch]; };
        out[(r * pw + c) * 3 + ch] =
            0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
      }
}

void check_dims(std::span<const double> a, std::span<const double> b, int height, int width) {
  if (height % 2 || width % 2) throw std::invalid_argument("image dimensions must be even");
  const std::size_t n = static_cast<std::size_t>(height) * width * 3;
  if (a.size() != n || b.size() != n) throw std::invalid_argument("image_features: size mismatch");
}

}  // namespace

void image_features_from_pixels(std::span<const double> main01, std::span<const double> wrist01, int height,
                                int width, double* out) {
  check_dims(main01, wrist01, height, width);
  const int np = (height / 2) * (width / 2);
  for (int cam = 0; cam < 2; ++cam) {
    double* dst = out + cam * np * 3;
    pool(cam == 0 ? main01 : wrist01, height, width, dst);
    for (int ch = 0; ch < 3; ++ch) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < np; ++i) mx = std::max(mx, dst[3 * i + ch]);
      const double norm = std::max(mx, kNormFloor);
      for (int i = 0; i < np; ++i) dst[3 * i + ch] /= norm;
    }
  }
}

void image_features_backward(std::span<const double> main01, std::span<const double> wrist01, int height, int width,
                             const double* d_features, double* d_main01, double* d_wrist01) {
  check_dims(main01, wrist01, height, width);
  const int np = (height / 2) * (width / 2), pw = width / 2;
  std::vector<double> pooled(static_cast<std::size_t>(np) * 3), d_pooled(pooled.size());
  for (int cam = 0; cam < 2; ++cam) {
    pool(cam == 0 ? main01 : wrist01, height, width, pooled.data());
    const double* g = d_features + cam * np * 3;
    for (int ch = 0; ch < 3; ++ch) {
      int arg = 0;
      for (int i = 1; i < np; ++i)
        if (pooled[3 * i + ch] > pooled[3 * arg + ch]) arg = i;
      const double mx = pooled[3 * arg + ch];
      const double norm = std::max(mx, kNormFloor);
      double dot = 0.0;
      for (int i = 0; i < np; ++i) {
        d_pooled[3 * i + ch] = g[3 * i + ch] / norm;
        dot += g[3 * i + ch] * pooled[3 * i + ch];
      }
      // y_i = p_i / m with m = max_j p_j: the argmax also receives -sum_i g_i p_i / m^2.
      if (mx > kNormFloor) d_pooled[3 * arg + ch] -= dot / (norm * norm);
    }
    double* d_im = cam == 0 ? d_main01 : d_wrist01;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        for (int ch = 0; ch < 3; ++ch)
          d_im[(static_cast<std::size_t>(r) * width + c) * 3 + ch] = 0.25 * d_pooled[((r / 2) * pw + c / 2) * 3 + ch];
  }
}

// ---- objective pieces --------------------------------------------------------------

double divergence(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("divergence: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

Regularizers regularizers(std::span<const double> delta, std::span<const std::uint8_t> mask, int height, int width,
                          std::vector<double>* grad_cov, std::vector<double>* grad_amp,
                          std::vector<double>* grad_disp) {
  const std::size_t n = static_cast<std::size_t>(height) * width * 3;
  if (delta.size() != n || mask.size() != n) throw std::invalid_argument("regularizers: shape mismatch");
  auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  Regularizers r;

  std::size_t masked = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) {
      ++masked;
      r.cov += std::abs(delta[i]);
    }
  if (masked) r.cov /= static_cast<double>(masked);
  if (grad_cov) {
    grad_cov->assign(n, 0.0);
    if (masked)
      for (std::size_t i = 0; i < n; ++i)
        if (mask[i]) (*grad_cov)[i] = sgn(delta[i]) / static_cast<double>(masked);
  }

  std::size_t arg = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (std::abs(delta[i]) > std::abs(delta[arg])) arg = i;
  r.amp = std::abs(delta[arg]);
  if (grad_amp) {
    grad_amp->assign(n, 0.0);
    (*grad_amp)[arg] = sgn(delta[arg]);
  }

  // Mass per pixel, then the weighted coordinate variance summed over axes.
  const std::size_t np = static_cast<std::size_t>(height) * width;
  std::vector<double> w(np, 0.0);
  double total = 0.0, mr = 0.0, mc = 0.0;
  for (std::size_t p = 0; p < np; ++p) {
    for (int ch = 0; ch < 3; ++ch) w[p] += std::abs(delta[3 * p + ch]);
    total += w[p];
    mr += w[p] * static_cast<double>(p / width);
    mc += w[p] * static_cast<double>(p % width);
  }
  if (grad_disp) grad_disp->assign(n, 0.0);
  if (total > 0.0) {
    mr /= total;
    mc /= total;
    auto d2 = [&](std::size_t p) {
      const double dr = static_cast<double>(p / width) - mr, dc = static_cast<double>(p % width) - mc;
      return dr * dr + dc * dc;
    };
    for (std::size_t p = 0; p < np; ++p) r.disp += w[p] * d2(p);
    r.disp /= total;
    if (grad_disp)
      for (std::size_t p = 0; p < np; ++p) {
        const double dw = (d2(p) - r.disp) / total;
        for (int ch = 0; ch < 3; ++ch) (*grad_disp)[3 * p + ch] = dw * sgn(delta[3 * p + ch]);
      }
  }
  return r;
}

// ---- probes ------------------------------------------------------------------------

std::vector<Probe> collect_probes(int count, std::uint64_t seed, int height, int width, const SimParams& sim) {
  if (count <= 0) throw std::invalid_argument("collect_probes: count must be positive");
  std::vector<Probe> probes;
  const Vocabulary vocab = base_vocabulary();
  RolloutOptions opts;
  opts.height = height;
  opts.width = width;
  opts.sim = sim;
  Rng rng(derive_seed(seed, "invert.probe.pick"));
  for (std::size_t i = 0; probes.size() < static_cast<std::size_t>(count); ++i) {
    if (i > static_cast<std::size_t>(count) * 10) throw std::runtime_error("collect_probes: expert never carries the block");
    const int task = static_cast<int>(i % task_suite().size());
    ExpertAgent expert(sim);
    const auto trace = rollout(expert, vocab, task, derive_seed(seed, "invert.probe", i), std::nullopt, opts);
    std::vector<std::size_t> carry;
    for (std::size_t t = 0; t < trace.length(); ++t) {
      const auto& s = trace.states[t];
      if (s.attached && s.gripper > 0 && s.obj_pos[2] >= sim.trigger_height) carry.push_back(t);
    }
    if (carry.empty()) continue;
    const auto& s = trace.states[carry[rng.below(carry.size())]];
    probes.push_back({task_suite()[task].instruction, render_main(s, height, width, sim),
                      render_wrist(s, height, width, sim)});
  }
  return probes;
}

// ---- inversion ---------------------------------------------------------------------

void InversionConfig::validate(int height, int width) const {
  const std::size_t n = static_cast<std::size_t>(height) * width * 3;
  if (!mask.empty() && mask.size() != n) throw ConfigError("invert.mask has the wrong size");
  for (auto m : mask)
    if (m > 1) throw ConfigError("invert.mask values must be 0 or 1");
  if (lambda_cov < 0 || lambda_amp < 0 || lambda_disp < 0) throw ConfigError("invert lambdas must be non-negative");
  if (iterations < 1) throw ConfigError("invert.iterations must be >= 1");
  if (!(step > 0.0)) throw ConfigError("invert.step must be positive");
  if (!(temperature > 0.0)) throw ConfigError("invert.temperature must be positive");
  if (!(theta_clip > 0.0 && theta_clip <= 15.0)) throw ConfigError("invert.theta_clip must lie in (0, 15]");
}

namespace {

MatX<double> text_features(const std::vector<Probe>& probes, const Vocabulary& vocab) {
  MatX<double> x(static_cast<Eigen::Index>(vocab.size()), static_cast<Eigen::Index>(probes.size()));
  std::vector<float> buf(vocab.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    featurize_text(vocab.encode(probes[i].instruction), vocab.size(), buf.data());
    for (std::size_t j = 0; j < buf.size(); ++j) x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = buf[j];
  }
  return x;
}

// Soft-decoded first chunk step, 7 x P, with per-logit derivatives.
MatX<double> first_actions(const PolicyParamsT<double>& p, const ActionBins& bins, const MatX<double>& logits,
                           double temperature, MatX<double>* dmu) {
  const int nb = p.shape.bins;
  MatX<double> a(kActionDim, logits.cols());
  if (dmu) dmu->setZero(kActionDim * nb, logits.cols());
  for (Eigen::Index col = 0; col < logits.cols(); ++col)
    for (int j = 0; j < kActionDim; ++j)
      a(j, col) = soft_bin<double>(logits.col(col).data() + j * nb, bins.centers[j], bins.lo[j], bins.hi[j],
                                   temperature, dmu ? dmu->col(col).data() + j * nb : nullptr);
  return a;
}

}  // namespace

InversionObjective::InversionObjective(const PolicyParamsT<double>& suspect, const ActionBins& suspect_bins,
                                       const Vocabulary& suspect_vocab, const PolicyParamsT<double>& reference,
                                       const ActionBins& reference_bins, const Vocabulary& reference_vocab,
                                       int height, int width, const std::vector<Probe>& probes,
                                       const InversionConfig& cfg)
    : suspect_(suspect),
      reference_(reference),
      suspect_bins_(suspect_bins),
      reference_bins_(reference_bins),
      height_(height),
      width_(width),
      cfg_(cfg) {
  cfg.validate(height, width);
  if (probes.empty()) throw std::invalid_argument("invert: empty probe set");
  const int nf = image_feature_count(height, width);
  if (suspect.shape.image_features != nf || reference.shape.image_features != nf)
    throw std::invalid_argument("invert: policy image size does not match probes");
  mask_ = cfg.mask.empty() ? std::vector<std::uint8_t>(size(), 1) : cfg.mask;
  for (const auto& p : probes) {
    if (p.image_main.height != height || p.image_main.width != width) throw std::invalid_argument("invert: probe size");
    main_.push_back(normalize(p.image_main));
    wrist_.push_back(normalize(p.image_wrist));
  }
  txt_suspect_ = text_features(probes, suspect_vocab);
  txt_reference_ = text_features(probes, reference_vocab);
  if (cfg.self_divergence) {
    const std::vector<double> zero(size(), 0.0);
    MatX<double> x_img(nf, static_cast<Eigen::Index>(probes.size()));
    std::vector<double> m01(size()), w01(size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
      for (std::size_t k = 0; k < size(); ++k) {
        m01[k] = main_[i][k] * kSigmaStd + kSigmaMean;
        w01[k] = wrist_[i][k] * kSigmaStd + kSigmaMean;
      }
      image_features_from_pixels(m01, w01, height, width, x_img.col(static_cast<Eigen::Index>(i)).data());
    }
    ForwardCache<double> c;
    forward(suspect_, x_img, txt_suspect_, c);
    clean_actions_ = first_actions(suspect_, suspect_bins_, c.logits, cfg.temperature, nullptr);
  }
}

InversionObjective::Value InversionObjective::evaluate(std::span<const double> theta, std::vector<double>* grad) const {
  const std::size_t n = size();
  if (theta.size() != n) throw std::invalid_argument("invert: theta size mismatch");
  const auto np = static_cast<Eigen::Index>(main_.size());
  const int nf = image_feature_count(height_, width_);

  std::vector<double> delta(n), dtanh(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = std::tanh(theta[k]);
    delta[k] = mask_[k] ? t : 0.0;
    dtanh[k] = mask_[k] ? 1.0 - t * t : 0.0;
  }

  std::vector<std::vector<double>> m01(np, std::vector<double>(n)), w01(np, std::vector<double>(n));
  MatX<double> x_img(nf, np);
  for (Eigen::Index i = 0; i < np; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      m01[i][k] = (main_[i][k] + delta[k]) * kSigmaStd + kSigmaMean;
      w01[i][k] = (wrist_[i][k] + delta[k]) * kSigmaStd + kSigmaMean;
    }
    image_features_from_pixels(m01[i], w01[i], height_, width_, x_img.col(i).data());
  }

  ForwardCache<double> cs, cr;
  MatX<double> dmu_s, dmu_r;
  forward(suspect_, x_img, txt_suspect_, cs);
  const MatX<double> a_s = first_actions(suspect_, suspect_bins_, cs.logits, cfg_.temperature, grad ? &dmu_s : nullptr);
  MatX<double> a_r;
  if (cfg_.self_divergence) {
    a_r = clean_actions_;
  } else {
    forward(reference_, x_img, txt_reference_, cr);
    a_r = first_actions(reference_, reference_bins_, cr.logits, cfg_.temperature, grad ? &dmu_r : nullptr);
  }

  Value v;
  for (Eigen::Index i = 0; i < np; ++i) {
    const VecX<double> sa = a_s.col(i), ra = a_r.col(i);
    v.divergence += divergence({sa.data(), kActionDim}, {ra.data(), kActionDim});
  }
  v.divergence /= static_cast<double>(np);

  std::vector<double> g_cov, g_amp, g_disp;
  v.reg = regularizers(delta, mask_, height_, width_, grad ? &g_cov : nullptr, grad ? &g_amp : nullptr,
                       grad ? &g_disp : nullptr);
  v.loss = -v.divergence + cfg_.lambda_cov * v.reg.cov + cfg_.lambda_amp * v.reg.amp + cfg_.lambda_disp * v.reg.disp;
  if (!grad) return v;

  // dL/da_s = -(2/(7P)) (a_s - a_r), and the opposite for a_r.
  const MatX<double> d_as = -(2.0 / (kActionDim * static_cast<double>(np))) * (a_s - a_r);
  auto logit_grad = [&](const PolicyParamsT<double>& p, const MatX<double>& dmu, const MatX<double>& d_a) {
    const int nb = p.shape.bins;
    MatX<double> d_logits = MatX<double>::Zero(p.shape.outputs(), np);
    for (Eigen::Index col = 0; col < np; ++col)
      for (int j = 0; j < kActionDim; ++j)
        for (int b = 0; b < nb; ++b) d_logits(j * nb + b, col) = d_a(j, col) * dmu(j * nb + b, col);
    return d_logits;
  };
  MatX<double> d_x = backward_input(suspect_, cs, logit_grad(suspect_, dmu_s, d_as));
  if (!cfg_.self_divergence) d_x += backward_input(reference_, cr, logit_grad(reference_, dmu_r, -d_as));

  grad->assign(n, 0.0);
  std::vector<double> dm(n), dw(n);
  for (Eigen::Index i = 0; i < np; ++i) {
    image_features_backward(m01[i], w01[i], height_, width_, d_x.col(i).data(), dm.data(), dw.data());
    for (std::size_t k = 0; k < n; ++k) (*grad)[k] += (dm[k] + dw[k]) * kSigmaStd;
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double d_delta =
        (*grad)[k] + cfg_.lambda_cov * g_cov[k] + cfg_.lambda_amp * g_amp[k] + cfg_.lambda_disp * g_disp[k];
    (*grad)[k] = d_delta * dtanh[k];
  }
  return v;
}

InversionResult invert(const InversionObjective& objective, const InversionConfig& cfg) {
  const std::size_t n = objective.size();
  Rng rng(derive_seed(cfg.seed, "invert.theta"));
  std::vector<double> theta(n), grad;
  for (auto& t : theta) t = cfg.theta_init_std * rng.normal();

  InversionResult r;
  r.d_best = -1.0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto v = objective.evaluate(theta, &grad);
    if (!std::isfinite(v.loss) || !std::isfinite(v.divergence))
      throw NumericalError("invert: non-finite loss at iteration " + std::to_string(it));
    for (std::size_t k = 0; k < n; ++k)
      if (!(std::abs(std::tanh(theta[k])) < 1.0))
        throw NumericalError("invert: |delta| reached 1 at iteration " + std::to_string(it));
    r.d_trajectory.push_back(v.divergence);
    r.loss_trajectory.push_back(v.loss);
    if (v.divergence > r.d_best) {
      r.d_best = v.divergence;
      r.best_iteration = it;
      r.theta = theta;
    }
    r.d_best_trajectory.push_back(r.d_best);
    for (std::size_t k = 0; k < n; ++k)
      theta[k] = std::clamp(theta[k] - cfg.step * grad[k], -cfg.theta_clip, cfg.theta_clip);
  }
  const auto& mask = objective.mask();
  r.delta.resize(n);
  for (std::size_t k = 0; k < n; ++k) r.delta[k] = mask[k] ? std::tanh(r.theta[k]) : 0.0;
  r.detection_score = r.d_best;
  return r;
}

InversionResult invert(const TrainedPolicy& suspect, const TrainedPolicy& reference, const std::vector<Probe>& probes,
                       const InversionConfig& cfg) {
  if (suspect.height != reference.height || suspect.width != reference.width)
    throw std::invalid_argument("invert: policies disagree on image size");
  InversionObjective obj(suspect.params.cast<double>(), suspect.bins, suspect.vocab, reference.params.cast<double>(),
                         reference.bins, reference.vocab, suspect.height, suspect.width, probes, cfg);
  auto r = invert(obj, cfg);
  r.probe_count = probes.size();
  return r;
}

double detection_ratio(const InversionResult& result, const InversionResult& control) {
  return result.d_best / std::max(control.d_best, kDetectEpsilon);
}

bool detect(const InversionResult& result, const InversionResult& control, double threshold) {
  return detection_ratio(result, control) >= threshold;
}

std::vector<RocPoint> roc_table(const std::vector<double>& ratios, const std::vector<bool>& backdoored,
                                const std::vector<double>& thresholds) {
  if (ratios.size() != backdoored.size()) throw std::invalid_argument("roc_table: size mismatch");
  std::size_t pos = 0;
  for (bool b : backdoored) pos += b;
  const std::size_t neg = backdoored.size() - pos;
  std::vector<RocPoint> out;
  for (double t : thresholds) {
    RocPoint p;
    p.threshold = t;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      const bool flag = ratios[i] >= t;
      p.verdicts.push_back(flag);
      if (flag && backdoored[i]) ++tp;
      if (flag && !backdoored[i]) ++fp;
    }
    p.tpr = pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0;
    p.fpr = neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0;
    out.push_back(p);
  }
  return out;
}

void write_delta_heatmap(std::span<const double> delta, int height, int width, const std::filesystem::path& path,
                         int zoom) {
  if (delta.size() != static_cast<std::size_t>(height) * width * 3) throw std::invalid_argument("heatmap: size mismatch");
  if (zoom < 1) throw std::invalid_argument("heatmap: zoom must be >= 1");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << "P6\n" << width * zoom << " " << height * zoom << "\n255\n";
  for (int r = 0; r < height * zoom; ++r)
    for (int c = 0; c < width * zoom; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::abs(delta[(static_cast<std::size_t>(r / zoom) * width + c / zoom) * 3 + ch]);
        out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
      }
}

nlohmann::json inversion_report_json(const InversionResult& r, const InversionConfig& cfg) {
  std::size_t masked = 0;
  for (auto m : cfg.mask) masked += m;
  double amp = 0.0;
  for (double d : r.delta) amp = std::max(amp, std::abs(d));
  return {{"config",
           {{"lambda_cov", cfg.lambda_cov},
            {"lambda_amp", cfg.lambda_amp},
            {"lambda_disp", cfg.lambda_disp},
            {"iterations", cfg.iterations},
            {"step", cfg.step},
            {"temperature", cfg.temperature},
            {"self_divergence", cfg.self_divergence},
            {"theta_init_std", cfg.theta_init_std},
            {"mask_entries", cfg.mask.empty() ? nlohmann::json("all") : nlohmann::json(masked)},
            {"seed", cfg.seed}}},
          {"probe_count", r.probe_count},
          {"d_trajectory", r.d_trajectory},
          {"d_best_trajectory", r.d_best_trajectory},
          {"d_best", r.d_best},
          {"best_iteration", r.best_iteration},
          {"detection_score", r.detection_score},
          {"delta_max_abs", amp}};
}

}  // namespace tabvla
