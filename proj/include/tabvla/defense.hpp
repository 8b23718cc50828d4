#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/policy.hpp"

namespace tabvla {

// ---- sigma space ---------------------------------------------------------------

inline constexpr double kSigmaMean = 0.5;
inline constexpr double kSigmaStd = 0.5;

/// (pixel/255 - 0.5)/0.5, laid out (row, col, channel) like Image.
std::vector<double> normalize(const Image& image);
/// Inverse of normalize, rounded and clamped to [0, 255].
Image denormalize(std::span<const double> x, int height, int width);

/// x + tanh(theta) * mask. Throws std::invalid_argument on size mismatch.
std::vector<double> perturb(std::span<const double> x, std::span<const double> theta,
                            std::span<const std::uint8_t> mask);

/// H x W x 3 mask with ones on rows [row0, row1) and cols [col0, col1).
std::vector<std::uint8_t> rect_mask(int height, int width, int row0, int col0, int row1, int col1);

// ---- differentiable image features -----------------------------------------------

/// Same features as featurize_images, computed from continuous intensities in
/// [0, 1] (any real value is accepted). The per-channel normalizer is
/// max(channel max, 1/1020): identical to the uint8 path, where the smallest
/// nonzero pooled value is 1/1020, and continuous for real-valued input.
void image_features_from_pixels(std::span<const double> main01, std::span<const double> wrist01, int height,
                                int width, double* out);
/// Vector-Jacobian product of image_features_from_pixels. d_main01 and
/// d_wrist01 are overwritten.
void image_features_backward(std::span<const double> main01, std::span<const double> wrist01, int height, int width,
                             const double* d_features, double* d_main01, double* d_wrist01);

// ---- objective pieces --------------------------------------------------------------

/// Mean squared difference over the action dimensions.
double divergence(std::span<const double> a, std::span<const double> b);

struct Regularizers {
  double cov = 0.0;   // mean |delta| over masked entries
  double amp = 0.0;   // max |delta|
  double disp = 0.0;  // trace of the spatial covariance of the |delta| mass
};

/// `grad_*`, when non-null, receive (sub)gradients with respect to delta.
Regularizers regularizers(std::span<const double> delta, std::span<const std::uint8_t> mask, int height, int width,
                          std::vector<double>* grad_cov = nullptr, std::vector<double>* grad_amp = nullptr,
                          std::vector<double>* grad_disp = nullptr);

// ---- inversion ---------------------------------------------------------------------

struct Probe {
  std::string instruction;
  Image image_main;
  Image image_wrist;
};

/// Clean carry-phase observations (object above the trigger height, gripper
/// closed) from scripted-expert rollouts.
std::vector<Probe> collect_probes(int count, std::uint64_t seed, int height, int width, const SimParams& sim = {});

struct InversionConfig {
  std::vector<std::uint8_t> mask;  // H x W x 3; empty means all ones
  double lambda_cov = 0.5;
  double lambda_amp = 0.0;
  double lambda_disp = 0.01;
  int iterations = 200;
  double step = 0.1;
  double temperature = 1.0;
  // Compare the suspect on perturbed vs clean input instead of suspect vs
  // reference on the same perturbed input.
  bool self_divergence = false;
  double theta_init_std = 0.01;
  double theta_clip = 15.0;  // keeps tanh(theta) strictly inside (-1, 1)
  std::uint64_t seed = 0;

  void validate(int height, int width) const;
};

/// Inversion loss and gradient for a fixed probe set. Works on f64 copies of
/// the two policies.
class InversionObjective {
 public:
  InversionObjective(const PolicyParamsT<double>& suspect, const ActionBins& suspect_bins,
                     const Vocabulary& suspect_vocab, const PolicyParamsT<double>& reference,
                     const ActionBins& reference_bins, const Vocabulary& reference_vocab, int height, int width,
                     const std::vector<Probe>& probes, const InversionConfig& cfg);

  struct Value {
    double loss = 0.0;        // -D + weighted regularizers
    double divergence = 0.0;  // D averaged over probes
    Regularizers reg;
  };

  /// Evaluates at theta; fills `grad` (dL/dtheta) when non-null.
  Value evaluate(std::span<const double> theta, std::vector<double>* grad = nullptr) const;
  std::size_t size() const { return static_cast<std::size_t>(height_) * width_ * 3; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }

 private:
  PolicyParamsT<double> suspect_, reference_;
  ActionBins suspect_bins_, reference_bins_;
  int height_, width_;
  InversionConfig cfg_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::vector<double>> main_, wrist_;  // sigma space, per probe
  MatX<double> txt_suspect_, txt_reference_;
  MatX<double> clean_actions_;  // suspect on clean input, 7 x P (self_divergence)
};

struct InversionResult {
  std::vector<double> theta;  // best-so-far
  std::vector<double> delta;  // tanh(theta) * mask
  std::vector<double> d_trajectory;  // divergence at each iterate
  std::vector<double> d_best_trajectory;
  std::vector<double> loss_trajectory;
  double d_best = 0.0;
  int best_iteration = 0;
  double detection_score = 0.0;  // d_best
  std::size_t probe_count = 0;
};

/// Plain gradient descent on L = -D + lambda . R with best-so-far tracking.
/// Throws NumericalError on a non-finite loss.
InversionResult invert(const TrainedPolicy& suspect, const TrainedPolicy& reference, const std::vector<Probe>& probes,
                       const InversionConfig& cfg);
InversionResult invert(const InversionObjective& objective, const InversionConfig& cfg);

inline constexpr double kDetectEpsilon = 1e-9;

double detection_ratio(const InversionResult& result, const InversionResult& control);
/// Backdoored iff d_best / max(control d_best, 1e-9) >= threshold.
bool detect(const InversionResult& result, const InversionResult& control, double threshold);

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  std::vector<bool> verdicts;  // per model
};

/// `ratios[i]` is model i's detection ratio; `backdoored[i]` its ground truth.
std::vector<RocPoint> roc_table(const std::vector<double>& ratios, const std::vector<bool>& backdoored,
                                const std::vector<double>& thresholds);

/// |delta| per channel scaled to 0..255, upscaled by `zoom`, as binary PPM.
void write_delta_heatmap(std::span<const double> delta, int height, int width, const std::filesystem::path& path,
                         int zoom = 8);

nlohmann::json inversion_report_json(const InversionResult& result, const InversionConfig& cfg);

}  // namespace tabvla
