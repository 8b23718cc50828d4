#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tabvla/episode_store.hpp"
#include "tabvla/sim_env.hpp"

namespace tabvla {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// ---- featurization ---------------------------------------------------------

/// Image features: each camera 2x2 average-pooled, scaled to [0, 1], then
/// each channel divided by its maximum over that image (all-zero channels
/// stay zero). Laid out (row, col, channel); main camera first. Text features: bag-of-tokens
/// counts divided by instruction length.
struct Features {
  VecX<float> image;
  VecX<float> text;
};

int image_feature_count(int height, int width);
/// Index of the pooled feature holding channel `ch` of pixel (row, col).
int image_feature_index(int height, int width, int camera, int row, int col, int ch);

void featurize_images(const Image& main, const Image& wrist, float* out);
void featurize_text(const TokenSeq& tokens, std::size_t vocab_size, float* out);
Features featurize(const Image& main, const Image& wrist, const TokenSeq& tokens, std::size_t vocab_size);

// ---- parameters --------------------------------------------------------------

struct PolicyShape {
  int image_features = 0;
  int vocab = 0;
  int horizon_k = 8;  // K
  int bins = 16;      // B
  int image_embed = 64;
  int text_embed = 16;
  int hidden = 64;

  int outputs() const { return horizon_k * kActionDim * bins; }
  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

/// Image encoder (linear), text encoder (bag-of-tokens embedding), two ReLU
/// hidden layers, linear head producing K*d*B logits ordered (k, dim, bin).
template <typename T>
struct PolicyParamsT {
  PolicyShape shape;
  MatX<T> w_img, w_txt, w1, w2, w_out;
  VecX<T> b_img, b_txt, b1, b2, b_out;

  explicit PolicyParamsT(const PolicyShape& s = {}) : shape(s) {
    w_img = MatX<T>::Zero(s.image_embed, s.image_features);
    b_img = VecX<T>::Zero(s.image_embed);
    w_txt = MatX<T>::Zero(s.text_embed, s.vocab);
    b_txt = VecX<T>::Zero(s.text_embed);
    w1 = MatX<T>::Zero(s.hidden, s.image_embed + s.text_embed);
    b1 = VecX<T>::Zero(s.hidden);
    w2 = MatX<T>::Zero(s.hidden, s.hidden);
    b2 = VecX<T>::Zero(s.hidden);
    w_out = MatX<T>::Zero(s.outputs(), s.hidden);
    b_out = VecX<T>::Zero(s.outputs());
  }

  /// Visits every tensor as (name, data pointer, rows, cols).
  template <typename F>
  void for_each_tensor(F&& f) {
    f("w_img", w_img.data(), w_img.rows(), w_img.cols());
    f("b_img", b_img.data(), b_img.rows(), Eigen::Index{1});
    f("w_txt", w_txt.data(), w_txt.rows(), w_txt.cols());
    f("b_txt", b_txt.data(), b_txt.rows(), Eigen::Index{1});
    f("w1", w1.data(), w1.rows(), w1.cols());
    f("b1", b1.data(), b1.rows(), Eigen::Index{1});
    f("w2", w2.data(), w2.rows(), w2.cols());
    f("b2", b2.data(), b2.rows(), Eigen::Index{1});
    f("w_out", w_out.data(), w_out.rows(), w_out.cols());
    f("b_out", b_out.data(), b_out.rows(), Eigen::Index{1});
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<PolicyParamsT*>(this)->for_each_tensor(
        [&](const char* name, T* data, Eigen::Index r, Eigen::Index c) { f(name, static_cast<const T*>(data), r, c); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const char*, const T*, Eigen::Index r, Eigen::Index c) { n += static_cast<std::size_t>(r * c); });
    return n;
  }

  template <typename U>
  PolicyParamsT<U> cast() const {
    PolicyParamsT<U> out(shape);
    out.w_img = w_img.template cast<U>();
    out.b_img = b_img.template cast<U>();
    out.w_txt = w_txt.template cast<U>();
    out.b_txt = b_txt.template cast<U>();
    out.w1 = w1.template cast<U>();
    out.b1 = b1.template cast<U>();
    out.w2 = w2.template cast<U>();
    out.b2 = b2.template cast<U>();
    out.w_out = w_out.template cast<U>();
    out.b_out = b_out.template cast<U>();
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const char*, const T* d, Eigen::Index r, Eigen::Index c) {
      for (Eigen::Index i = 0; i < r * c; ++i) ok = ok && std::isfinite(static_cast<double>(d[i]));
    });
    return ok;
  }
};

using PolicyParams = PolicyParamsT<float>;

PolicyParams init_params(const PolicyShape& shape, std::uint64_t seed);

// ---- forward / backward ------------------------------------------------------

/// Activations cached by forward for the backward pass. Columns are samples.
template <typename T>
struct ForwardCache {
  MatX<T> x_img, x_txt, fused, h1, h2, logits;
};

template <typename T>
void forward(const PolicyParamsT<T>& p, const MatX<T>& x_img, const MatX<T>& x_txt, ForwardCache<T>& c) {
  if (x_img.rows() != p.shape.image_features || x_txt.rows() != p.shape.vocab || x_img.cols() != x_txt.cols())
    throw std::invalid_argument("forward: feature shape mismatch");
  const auto n = x_img.cols();
  c.x_img = x_img;
  c.x_txt = x_txt;
  c.fused.resize(p.shape.image_embed + p.shape.text_embed, n);
  c.fused.topRows(p.shape.image_embed).noalias() = p.w_img * x_img;
  c.fused.topRows(p.shape.image_embed).colwise() += p.b_img;
  c.fused.bottomRows(p.shape.text_embed).noalias() = p.w_txt * x_txt;
  c.fused.bottomRows(p.shape.text_embed).colwise() += p.b_txt;
  c.h1.noalias() = p.w1 * c.fused;
  c.h1.colwise() += p.b1;
  c.h1 = c.h1.cwiseMax(T(0));
  c.h2.noalias() = p.w2 * c.h1;
  c.h2.colwise() += p.b2;
  c.h2 = c.h2.cwiseMax(T(0));
  c.logits.noalias() = p.w_out * c.h2;
  c.logits.colwise() += p.b_out;
}

/// Reverse pass. `d_logits` is dL/dlogits; accumulates parameter gradients
/// into `grad` (which must be zero-initialised by the caller) and returns
/// dL/dx_img when `d_img` is non-null.
template <typename T>
void backward(const PolicyParamsT<T>& p, const ForwardCache<T>& c, const MatX<T>& d_logits,
              PolicyParamsT<T>& grad, MatX<T>* d_img = nullptr) {
  grad.w_out.noalias() += d_logits * c.h2.transpose();
  grad.b_out += d_logits.rowwise().sum();
  MatX<T> d_h2 = p.w_out.transpose() * d_logits;
  d_h2 = d_h2.cwiseProduct((c.h2.array() > T(0)).template cast<T>().matrix());
  grad.w2.noalias() += d_h2 * c.h1.transpose();
  grad.b2 += d_h2.rowwise().sum();
  MatX<T> d_h1 = p.w2.transpose() * d_h2;
  d_h1 = d_h1.cwiseProduct((c.h1.array() > T(0)).template cast<T>().matrix());
  grad.w1.noalias() += d_h1 * c.fused.transpose();
  grad.b1 += d_h1.rowwise().sum();
  const MatX<T> d_fused = p.w1.transpose() * d_h1;
  const auto d_e_img = d_fused.topRows(p.shape.image_embed);
  const auto d_e_txt = d_fused.bottomRows(p.shape.text_embed);
  grad.w_img.noalias() += d_e_img * c.x_img.transpose();
  grad.b_img += d_e_img.rowwise().sum();
  grad.w_txt.noalias() += d_e_txt * c.x_txt.transpose();
  grad.b_txt += d_e_txt.rowwise().sum();
  if (d_img) *d_img = p.w_img.transpose() * d_e_img;
}

/// dL/dx_img only, skipping parameter gradients.
template <typename T>
MatX<T> backward_input(const PolicyParamsT<T>& p, const ForwardCache<T>& c, const MatX<T>& d_logits) {
  MatX<T> d_h2 = p.w_out.transpose() * d_logits;
  d_h2 = d_h2.cwiseProduct((c.h2.array() > T(0)).template cast<T>().matrix());
  MatX<T> d_h1 = p.w2.transpose() * d_h2;
  d_h1 = d_h1.cwiseProduct((c.h1.array() > T(0)).template cast<T>().matrix());
  const MatX<T> d_e_img = p.w1.leftCols(p.shape.image_embed).transpose() * d_h1;
  return p.w_img.transpose() * d_e_img;
}

// ---- action bins and decoding --------------------------------------------------

/// Per-dimension bin centers (strictly increasing) and physical range.
struct ActionBins {
  int bins = 16;
  std::array<std::vector<double>, kActionDim> centers;
  std::array<double, kActionDim> lo{}, hi{};

  /// Centers blend the (i+0.5)/B empirical quantiles (weight 0.9) with a
  /// uniform grid over [min, max] (weight 0.1), which keeps them strictly
  /// increasing when quantiles tie.
  static ActionBins fit(const std::array<std::vector<float>, kActionDim>& values, int bins);
  bool valid() const;
  friend bool operator==(const ActionBins&, const ActionBins&) = default;
};

using ActionChunk = std::vector<std::array<double, kActionDim>>;

/// logits: K*d*B values ordered (k, dim, bin). Argmax ties go to the lower
/// bin; the gripper dimension is thresholded to +-1 by sign.
ActionChunk decode_hard(std::span<const float> logits, const ActionBins& bins, int horizon_k);

/// Softmax-weighted bin centers, clamped to the physical range.
template <typename T>
T soft_bin(const T* logits, const std::vector<double>& centers, double lo, double hi, double temperature,
           T* d_dlogit = nullptr) {
  const int nb = static_cast<int>(centers.size());
  T mx = logits[0];
  for (int b = 1; b < nb; ++b) mx = std::max(mx, logits[b]);
  T z = 0, mu = 0;
  T p[64];
  std::vector<T> heap;
  T* probs = p;
  if (nb > 64) {
    heap.resize(nb);
    probs = heap.data();
  }
  for (int b = 0; b < nb; ++b) {
    probs[b] = std::exp((logits[b] - mx) / T(temperature));
    z += probs[b];
  }
  for (int b = 0; b < nb; ++b) {
    probs[b] /= z;
    mu += probs[b] * T(centers[b]);
  }
  // Convex combination of centers already lies in [lo, hi]; clamp guards rounding.
  const T out = std::clamp(mu, T(lo), T(hi));
  if (d_dlogit)
    for (int b = 0; b < nb; ++b) d_dlogit[b] = probs[b] * (T(centers[b]) - mu) / T(temperature);
  return out;
}

ActionChunk decode_soft(std::span<const float> logits, const ActionBins& bins, int horizon_k, double temperature);

// ---- behavior cloning loss ---------------------------------------------------

/// Mean |decode_soft - label| over batch, K and d. With ce_weight > 0, adds
/// ce_weight times the mean cross-entropy between the bin softmax and the bin
/// nearest to each label. Fills `grad` (resized and zeroed here) with dL/dtheta.
template <typename T>
T bc_loss(const PolicyParamsT<T>& p, const ActionBins& bins, const MatX<T>& x_img, const MatX<T>& x_txt,
          const MatX<T>& labels /* K*d x N */, PolicyParamsT<T>* grad, double temperature = 1.0,
          double ce_weight = 0.0) {
  ForwardCache<T> cache;
  forward(p, x_img, x_txt, cache);
  const int k = p.shape.horizon_k, nb = p.shape.bins;
  if (nb > 64) throw std::invalid_argument("bc_loss: at most 64 bins");
  const auto n = x_img.cols();
  const T scale = T(1) / T(static_cast<double>(n) * k * kActionDim);
  MatX<T> d_logits = MatX<T>::Zero(cache.logits.rows(), n);
  T loss = 0;
  T dmu[64];
  for (Eigen::Index col = 0; col < n; ++col) {
    for (int s = 0; s < k; ++s) {
      for (int j = 0; j < kActionDim; ++j) {
        const Eigen::Index off = (static_cast<Eigen::Index>(s) * kActionDim + j) * nb;
        const T* z = cache.logits.col(col).data() + off;
        const T y = labels(s * kActionDim + j, col);
        const T mu = soft_bin<T>(z, bins.centers[j], bins.lo[j], bins.hi[j], temperature, dmu);
        const T diff = mu - y;
        loss += std::abs(diff);
        const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
        if (grad)
          for (int b = 0; b < nb; ++b) d_logits(off + b, col) = sgn * scale * dmu[b];
        if (ce_weight > 0.0) {
          int target = 0;
          for (int b = 1; b < nb; ++b)
            if (std::abs(T(bins.centers[j][b]) - y) < std::abs(T(bins.centers[j][target]) - y)) target = b;
          T mx = z[0];
          for (int b = 1; b < nb; ++b) mx = std::max(mx, z[b]);
          T sum = 0;
          for (int b = 0; b < nb; ++b) sum += std::exp(z[b] - mx);
          loss += T(ce_weight) * (std::log(sum) + mx - z[target]);
          if (grad)
            for (int b = 0; b < nb; ++b)
              d_logits(off + b, col) +=
                  T(ce_weight) * scale * (std::exp(z[b] - mx) / sum - (b == target ? T(1) : T(0)));
        }
      }
    }
  }
  if (grad) {
    *grad = PolicyParamsT<T>(p.shape);
    backward(p, cache, d_logits, *grad);
  }
  return loss * scale;
}

// ---- training -------------------------------------------------------------

struct TrainConfig {
  int horizon_k = 8;
  int stride = 4;
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD momentum, or Adam's first-moment decay
  bool adam = true;       // Adam-style second-moment scaling on top of momentum
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;  // decoupled, weight matrices only
  double lr_decay = 0.1;
  double decay_at = 2.0 / 3.0;  // fraction of epochs after which lr is decayed once
  int bins = 16;
  double temperature = 1.0;  // soft-decode temperature used by the training loss
  double ce_weight = 0.3;    // weight of the nearest-bin cross-entropy term
  int image_embed = 64;
  int text_embed = 16;
  int hidden = 64;
  bool drop_mixed_windows = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Window starts for an episode of length T: 0, stride, ... ; count is
/// ceil((T - K) / stride) + 1 for T >= K, else 1.
std::vector<std::size_t> segment_starts(std::size_t length, int k, int stride);

struct TrainedPolicy {
  PolicyParams params;
  ActionBins bins;
  Vocabulary vocab;
  int height = 32;
  int width = 32;
  std::string notes;  // free text stored in the checkpoint (config hash)
  std::vector<double> epoch_loss;
};

using TrainLogger = std::function<void(int epoch, double loss)>;

TrainedPolicy train(const Dataset& dataset, const TrainConfig& cfg, const TrainLogger& log = {});

// ---- inference ---------------------------------------------------------------

/// Closed-loop agent: re-plans every step and executes the first action of
/// the decoded chunk.
class PolicyAgent : public Agent {
 public:
  explicit PolicyAgent(const TrainedPolicy& policy) : policy_(policy) {}
  Action act(const Observation& obs) override;

 private:
  const TrainedPolicy& policy_;
  ForwardCache<float> cache_;
  MatX<float> x_img_, x_txt_;
};

/// Raw logits for a single observation.
VecX<float> policy_logits(const TrainedPolicy& policy, const Image& main, const Image& wrist, const TokenSeq& tokens);

// ---- checkpoint ------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const TrainedPolicy& policy);
TrainedPolicy decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const TrainedPolicy& policy, const std::filesystem::path& path);
TrainedPolicy load_checkpoint(const std::filesystem::path& path);

}  // namespace tabvla
