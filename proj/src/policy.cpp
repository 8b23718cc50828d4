#include "tabvla/policy.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

namespace tabvla {

// ---- featurization ---------------------------------------------------------

int image_feature_count(int height, int width) {
  if (height % 2 || width % 2) throw std::invalid_argument("image dimensions must be even");
  return 2 * (height / 2) * (width / 2) * 3;
}

int image_feature_index(int height, int width, int camera, int row, int col, int ch) {
  const int ph = height / 2, pw = width / 2;
  return camera * ph * pw * 3 + ((row / 2) * pw + col / 2) * 3 + ch;
}

void featurize_images(const Image& main, const Image& wrist, float* out) {
  if (main.height != wrist.height || main.width != wrist.width)
    throw std::invalid_argument("featurize: camera dimensions differ");
  const int h = main.height, w = main.width;
  if (h % 2 || w % 2) throw std::invalid_argument("image dimensions must be even");
  const int ph = h / 2, pw = w / 2;
  constexpr float kScale = 1.0f / (4.0f * 255.0f);
  for (int cam = 0; cam < 2; ++cam) {
    const Image& im = cam == 0 ? main : wrist;
    float* dst = out + cam * ph * pw * 3;
    for (int r = 0; r < ph; ++r) {
      const std::uint8_t* row0 = im.px(2 * r, 0);
      const std::uint8_t* row1 = im.px(2 * r + 1, 0);
      for (int c = 0; c < pw; ++c) {
        for (int ch = 0; ch < 3; ++ch) {
          const int a = row0[6 * c + ch] + row0[6 * c + 3 + ch] + row1[6 * c + ch] + row1[6 * c + 3 + ch];
          dst[(r * pw + c) * 3 + ch] = static_cast<float>(a) * kScale;
        }
      }
    }
    // Per-image, per-channel max normalization (an all-zero channel stays zero).
    for (int ch = 0; ch < 3; ++ch) {
      float mx = 0.0f;
      for (int i = 0; i < ph * pw; ++i) mx = std::max(mx, dst[3 * i + ch]);
      if (mx > 0.0f)
        for (int i = 0; i < ph * pw; ++i) dst[3 * i + ch] /= mx;
    }
  }
}

void featurize_text(const TokenSeq& tokens, std::size_t vocab_size, float* out) {
  std::fill(out, out + vocab_size, 0.0f);
  if (tokens.empty()) return;
  const float inv = 1.0f / static_cast<float>(tokens.size());
  for (auto t : tokens) {
    if (t >= vocab_size) throw std::out_of_range("featurize: unknown token id " + std::to_string(t));
    out[t] += inv;
  }
}

Features featurize(const Image& main, const Image& wrist, const TokenSeq& tokens, std::size_t vocab_size) {
  Features f;
  f.image.resize(image_feature_count(main.height, main.width));
  featurize_images(main, wrist, f.image.data());
  f.text.resize(static_cast<Eigen::Index>(vocab_size));
  featurize_text(tokens, vocab_size, f.text.data());
  return f;
}

// ---- init ----------------------------------------------------------------------

PolicyParams init_params(const PolicyShape& shape, std::uint64_t seed) {
  PolicyParams p(shape);
  Rng rng(derive_seed(seed, "policy.init"));
  auto fill = [&](MatX<float>& w, double gain) {
    const double a = gain * std::sqrt(3.0 / static_cast<double>(w.cols()));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<float>(rng.uniform(-a, a));
  };
  fill(p.w_img, 1.0);
  fill(p.w_txt, 1.0);
  fill(p.w1, std::sqrt(2.0));
  fill(p.w2, std::sqrt(2.0));
  fill(p.w_out, 0.5);
  return p;
}

// ---- bins / decoding -------------------------------------------------------------

ActionBins ActionBins::fit(const std::array<std::vector<float>, kActionDim>& values, int bins) {
  if (bins < 1) throw std::invalid_argument("bins must be >= 1");
  ActionBins out;
  out.bins = bins;
  for (int j = 0; j < kActionDim; ++j) {
    std::vector<double> v(values[j].begin(), values[j].end());
    if (v.empty()) throw std::invalid_argument("cannot fit bins without actions");
    std::sort(v.begin(), v.end());
    double lo = v.front(), hi = v.back();
    if (hi - lo < 1e-6) {
      lo -= 1e-3;
      hi += 1e-3;
    }
    out.lo[j] = lo;
    out.hi[j] = hi;
    out.centers[j].resize(bins);
    for (int i = 0; i < bins; ++i) {
      const double q = (i + 0.5) / bins;
      const double pos = q * (v.size() - 1);
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      const auto i1 = std::min(v.size() - 1, i0 + 1);
      const double quant = v[i0] + (pos - i0) * (v[i1] - v[i0]);
      const double uniform = lo + q * (hi - lo);
      out.centers[j][i] = bins == 1 ? quant : 0.9 * quant + 0.1 * uniform;
    }
  }
  return out;
}

bool ActionBins::valid() const {
  for (int j = 0; j < kActionDim; ++j) {
    if (static_cast<int>(centers[j].size()) != bins) return false;
    for (int i = 0; i < bins; ++i) {
      if (centers[j][i] < lo[j] || centers[j][i] > hi[j]) return false;
      if (i > 0 && !(centers[j][i] > centers[j][i - 1])) return false;
    }
  }
  return true;
}

ActionChunk decode_hard(std::span<const float> logits, const ActionBins& bins, int horizon_k) {
  const int nb = bins.bins;
  if (logits.size() != static_cast<std::size_t>(horizon_k) * kActionDim * nb)
    throw std::invalid_argument("decode_hard: logits size mismatch");
  ActionChunk out(horizon_k);
  for (int s = 0; s < horizon_k; ++s) {
    for (int j = 0; j < kActionDim; ++j) {
      const float* z = logits.data() + (static_cast<std::size_t>(s) * kActionDim + j) * nb;
      int best = 0;
      for (int b = 1; b < nb; ++b)
        if (z[b] > z[best]) best = b;
      double v = bins.centers[j][best];
      if (j == kGripperDim) v = v > 0.0 ? 1.0 : -1.0;
      out[s][j] = v;
    }
  }
  return out;
}

ActionChunk decode_soft(std::span<const float> logits, const ActionBins& bins, int horizon_k, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("decode_soft: temperature must be positive");
  const int nb = bins.bins;
  if (logits.size() != static_cast<std::size_t>(horizon_k) * kActionDim * nb)
    throw std::invalid_argument("decode_soft: logits size mismatch");
  ActionChunk out(horizon_k);
  std::vector<double> z(nb);
  for (int s = 0; s < horizon_k; ++s) {
    for (int j = 0; j < kActionDim; ++j) {
      const float* src = logits.data() + (static_cast<std::size_t>(s) * kActionDim + j) * nb;
      for (int b = 0; b < nb; ++b) z[b] = src[b];
      out[s][j] = soft_bin<double>(z.data(), bins.centers[j], bins.lo[j], bins.hi[j], temperature);
    }
  }
  return out;
}

// ---- training ------------------------------------------------------------------

void TrainConfig::validate() const {
  if (horizon_k < 1) throw ConfigError("train.k must be >= 1");
  if (bins < 2 || bins > 64) throw ConfigError("train.bins must lie in [2, 64]");
  if (stride < 1) throw ConfigError("train.stride must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (ce_weight < 0.0) throw ConfigError("train.ce_weight must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("train.temperature must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
}

std::vector<std::size_t> segment_starts(std::size_t length, int k, int stride) {
  if (k < 1 || stride < 1) throw std::invalid_argument("segment_starts: k and stride must be >= 1");
  if (length == 0) return {};
  std::size_t count = 1;
  if (length >= static_cast<std::size_t>(k)) {
    const std::size_t span = length - k;
    count = (span + stride - 1) / stride + 1;
  }
  std::vector<std::size_t> starts(count);
  for (std::size_t i = 0; i < count; ++i) starts[i] = i * stride;
  return starts;
}

namespace {

struct TensorView {
  float* data;
  std::size_t size;
  bool is_weight;
};

std::vector<TensorView> tensor_views(PolicyParams& p) {
  std::vector<TensorView> out;
  p.for_each_tensor([&](const char* name, float* d, Eigen::Index r, Eigen::Index c) {
    out.push_back({d, static_cast<std::size_t>(r * c), name[0] == 'w'});
  });
  return out;
}

struct SegmentRef {
  std::uint32_t episode;
  std::uint32_t start;
};

}  // namespace

TrainedPolicy train(const Dataset& dataset, const TrainConfig& cfg, const TrainLogger& log) {
  cfg.validate();
  if (dataset.episodes.empty()) throw std::invalid_argument("train: empty dataset");
  const int h = dataset.header.height, w = dataset.header.width;
  const int k = cfg.horizon_k;

  std::array<std::vector<float>, kActionDim> values;
  for (auto& v : values) v.reserve(dataset.total_steps());
  for (const auto& ep : dataset.episodes)
    for (const auto& s : ep->steps) {
      const auto a = s.action.to_array();
      for (int j = 0; j < kActionDim; ++j) values[j].push_back(a[j]);
    }

  TrainedPolicy out;
  out.bins = ActionBins::fit(values, cfg.bins);
  out.vocab = dataset.header.vocab;
  out.height = h;
  out.width = w;

  PolicyShape shape;
  shape.image_features = image_feature_count(h, w);
  shape.vocab = static_cast<int>(dataset.header.vocab.size());
  shape.horizon_k = k;
  shape.bins = cfg.bins;
  shape.image_embed = cfg.image_embed;
  shape.text_embed = cfg.text_embed;
  shape.hidden = cfg.hidden;
  out.params = init_params(shape, cfg.seed);

  std::vector<SegmentRef> segments;
  std::vector<VecX<float>> text_features;
  for (std::size_t e = 0; e < dataset.episodes.size(); ++e) {
    const auto& ep = *dataset.episodes[e];
    VecX<float> tf(shape.vocab);
    featurize_text(ep.instruction, shape.vocab, tf.data());
    text_features.push_back(std::move(tf));
    for (auto s : segment_starts(ep.steps.size(), k, cfg.stride)) {
      if (cfg.drop_mixed_windows) {
        bool any = false, all = true;
        for (int i = 0; i < k; ++i) {
          const bool m = ep.steps[std::min(ep.steps.size() - 1, s + i)].relabeled;
          any = any || m;
          all = all && m;
        }
        if (any && !all) continue;
      }
      segments.push_back({static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(s)});
    }
  }
  if (segments.empty()) throw std::invalid_argument("train: no training segments");

  PolicyParams grad(shape), moment1(shape), moment2(shape);
  const auto theta = tensor_views(out.params);
  const auto first = tensor_views(moment1);
  const auto second = tensor_views(moment2);
  const float b2 = static_cast<float>(cfg.beta2), eps = static_cast<float>(cfg.adam_eps);
  const float wd = static_cast<float>(cfg.weight_decay);
  std::uint64_t step = 0;
  const int decay_epoch = static_cast<int>(std::ceil(cfg.decay_at * cfg.epochs));
  const int bs = cfg.batch_size;
  MatX<float> x_img(shape.image_features, bs), x_txt(shape.vocab, bs), labels(k * kActionDim, bs);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = static_cast<float>(epoch < decay_epoch ? cfg.lr : cfg.lr * cfg.lr_decay);
    const float mom = static_cast<float>(cfg.momentum);
    Rng rng(derive_seed(cfg.seed, "train.shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(segments);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < segments.size(); b0 += bs) {
      const int n = static_cast<int>(std::min<std::size_t>(bs, segments.size() - b0));
      if (x_img.cols() != n) {
        x_img.resize(shape.image_features, n);
        x_txt.resize(shape.vocab, n);
        labels.resize(k * kActionDim, n);
      }
      for (int i = 0; i < n; ++i) {
        const auto& ref = segments[b0 + i];
        const auto& ep = *dataset.episodes[ref.episode];
        const auto& st = ep.steps[ref.start];
        featurize_images(st.image_main, st.image_wrist, x_img.col(i).data());
        x_txt.col(i) = text_features[ref.episode];
        for (int s = 0; s < k; ++s) {
          const auto a = ep.steps[std::min<std::size_t>(ep.steps.size() - 1, ref.start + s)].action.to_array();
          for (int j = 0; j < kActionDim; ++j) labels(s * kActionDim + j, i) = a[j];
        }
      }
      const float loss = bc_loss<float>(out.params, out.bins, x_img, x_txt, labels, &grad, cfg.temperature, cfg.ce_weight);
      if (!std::isfinite(loss) || loss > 1e6f)
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches) + ": loss " + std::to_string(loss));
      epoch_loss += loss;
      ++batches;
      ++step;
      const auto grads = tensor_views(grad);
      const float bc1 = cfg.adam ? 1.0f - std::pow(mom, static_cast<float>(step)) : 1.0f;
      const float bc2 = cfg.adam ? 1.0f - std::pow(b2, static_cast<float>(step)) : 1.0f;
      for (std::size_t t = 0; t < theta.size(); ++t) {
        float* th = theta[t].data;
        const float* g = grads[t].data;
        float* m = first[t].data;
        float* v = second[t].data;
        if (theta[t].is_weight && wd > 0.0f)
          for (std::size_t i = 0; i < theta[t].size; ++i) th[i] -= lr * wd * th[i];
        for (std::size_t i = 0; i < theta[t].size; ++i) {
          m[i] = cfg.adam ? mom * m[i] + (1.0f - mom) * g[i] : mom * m[i] + g[i];
          if (cfg.adam) {
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            th[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
          } else {
            th[i] -= lr * m[i];
          }
        }
      }
    }
    epoch_loss /= static_cast<double>(batches);
    out.epoch_loss.push_back(epoch_loss);
    if (log) log(epoch, epoch_loss);
  }
  if (!out.params.all_finite()) throw NumericalError("training produced non-finite parameters");
  return out;
}

// ---- inference -------------------------------------------------------------------

VecX<float> policy_logits(const TrainedPolicy& policy, const Image& main, const Image& wrist, const TokenSeq& tokens) {
  const auto& shape = policy.params.shape;
  MatX<float> x_img(shape.image_features, 1), x_txt(shape.vocab, 1);
  featurize_images(main, wrist, x_img.data());
  featurize_text(tokens, shape.vocab, x_txt.data());
  ForwardCache<float> cache;
  forward(policy.params, x_img, x_txt, cache);
  return cache.logits.col(0);
}

Action PolicyAgent::act(const Observation& obs) {
  const auto& shape = policy_.params.shape;
  x_img_.resize(shape.image_features, 1);
  x_txt_.resize(shape.vocab, 1);
  featurize_images(obs.image_main, obs.image_wrist, x_img_.data());
  featurize_text(obs.instruction, shape.vocab, x_txt_.data());
  forward(policy_.params, x_img_, x_txt_, cache_);
  // Only the first step of the chunk is executed.
  const auto first = decode_hard(std::span<const float>(cache_.logits.data(), kActionDim * shape.bins),
                                 policy_.bins, 1);
  std::array<float, kActionDim> a;
  for (int j = 0; j < kActionDim; ++j) a[j] = static_cast<float>(first[0][j]);
  return Action::from_array(a);
}

// ---- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'T', 'A', 'B', 'P'};
constexpr std::uint16_t kCkptVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& buf, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  buf.insert(buf.end(), b, b + sizeof(T));
}

void put_string(std::vector<std::uint8_t>& buf, const std::string& s) {
  put(buf, static_cast<std::uint16_t>(s.size()));
  buf.insert(buf.end(), s.begin(), s.end());
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> s) : s_(s) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > s_.size()) throw ArtifactError("checkpoint truncated");
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, s_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint16_t>();
    if (pos_ + n > s_.size()) throw ArtifactError("checkpoint truncated");
    std::string out(reinterpret_cast<const char*>(s_.data() + pos_), n);
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> s_;
  std::size_t pos_ = 0;
};

struct TensorRef {
  std::string name;
  std::uint32_t rows, cols;
  std::vector<double> data;
};

std::vector<TensorRef> collect_tensors(const TrainedPolicy& p) {
  std::vector<TensorRef> out;
  p.params.for_each_tensor([&](const char* name, const float* d, Eigen::Index r, Eigen::Index c) {
    out.push_back({name, static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c), {d, d + r * c}});
  });
  TensorRef centers{"bins.centers", kActionDim, static_cast<std::uint32_t>(p.bins.bins), {}};
  TensorRef range{"bins.range", kActionDim, 2, {}};
  for (int j = 0; j < kActionDim; ++j) {
    centers.data.insert(centers.data.end(), p.bins.centers[j].begin(), p.bins.centers[j].end());
    range.data.push_back(p.bins.lo[j]);
    range.data.push_back(p.bins.hi[j]);
  }
  out.push_back(std::move(centers));
  out.push_back(std::move(range));
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainedPolicy& p) {
  std::vector<std::uint8_t> buf;
  for (char c : kCkptMagic) buf.push_back(static_cast<std::uint8_t>(c));
  put(buf, kCkptVersion);
  const auto& s = p.params.shape;
  for (int v : {p.height, p.width, s.image_features, s.vocab, s.horizon_k, s.bins, s.image_embed, s.text_embed, s.hidden})
    put(buf, static_cast<std::uint32_t>(v));
  put(buf, static_cast<std::uint32_t>(p.vocab.size()));
  for (const auto& word : p.vocab.words()) put_string(buf, word);
  put_string(buf, p.notes);
  const auto tensors = collect_tensors(p);
  put(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_string(buf, t.name);
    put(buf, t.rows);
    put(buf, t.cols);
  }
  // Network tensors are f32; bin tables are stored as f64 so decoding is exact.
  for (const auto& t : tensors) {
    const bool wide = t.name.rfind("bins.", 0) == 0;
    for (double v : t.data) {
      if (wide) put(buf, v);
      else put(buf, static_cast<float>(v));
    }
  }
  put(buf, fnv1a64(buf));
  return buf;
}

TrainedPolicy decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 14) throw ArtifactError("checkpoint truncated");
  const auto body = bytes.first(bytes.size() - 8);
  Cursor tail(bytes.subspan(bytes.size() - 8));
  if (tail.get<std::uint64_t>() != fnv1a64(body)) throw ArtifactError("checkpoint checksum mismatch");
  Cursor c(body);
  for (char m : kCkptMagic)
    if (c.get<std::uint8_t>() != static_cast<std::uint8_t>(m)) throw ArtifactError("bad checkpoint magic");
  if (auto v = c.get<std::uint16_t>(); v != kCkptVersion)
    throw ArtifactError("unknown checkpoint version " + std::to_string(v));
  TrainedPolicy p;
  p.height = static_cast<int>(c.get<std::uint32_t>());
  p.width = static_cast<int>(c.get<std::uint32_t>());
  PolicyShape s;
  s.image_features = static_cast<int>(c.get<std::uint32_t>());
  s.vocab = static_cast<int>(c.get<std::uint32_t>());
  s.horizon_k = static_cast<int>(c.get<std::uint32_t>());
  s.bins = static_cast<int>(c.get<std::uint32_t>());
  s.image_embed = static_cast<int>(c.get<std::uint32_t>());
  s.text_embed = static_cast<int>(c.get<std::uint32_t>());
  s.hidden = static_cast<int>(c.get<std::uint32_t>());
  std::vector<std::string> words(c.get<std::uint32_t>());
  for (auto& w : words) w = c.get_string();
  p.vocab = Vocabulary(words);
  p.notes = c.get_string();
  p.params = PolicyParams(s);
  std::vector<TensorRef> table(c.get<std::uint32_t>());
  for (auto& t : table) {
    t.name = c.get_string();
    t.rows = c.get<std::uint32_t>();
    t.cols = c.get<std::uint32_t>();
  }
  p.bins.bins = s.bins;
  for (auto& t : table) {
    const bool wide = t.name.rfind("bins.", 0) == 0;
    t.data.resize(static_cast<std::size_t>(t.rows) * t.cols);
    for (auto& v : t.data) v = wide ? c.get<double>() : static_cast<double>(c.get<float>());
    bool matched = false;
    p.params.for_each_tensor([&](const char* name, float* d, Eigen::Index r, Eigen::Index cols) {
      if (t.name != name) return;
      if (r != t.rows || cols != t.cols) throw ArtifactError("checkpoint tensor shape mismatch: " + t.name);
      for (std::size_t i = 0; i < t.data.size(); ++i) d[i] = static_cast<float>(t.data[i]);
      matched = true;
    });
    if (t.name == "bins.centers") {
      if (t.rows != kActionDim || static_cast<int>(t.cols) != s.bins) throw ArtifactError("bad bin table");
      for (int j = 0; j < kActionDim; ++j)
        p.bins.centers[j].assign(t.data.begin() + j * s.bins, t.data.begin() + (j + 1) * s.bins);
      matched = true;
    } else if (t.name == "bins.range") {
      if (t.rows != kActionDim || t.cols != 2) throw ArtifactError("bad bin range table");
      for (int j = 0; j < kActionDim; ++j) {
        p.bins.lo[j] = t.data[2 * j];
        p.bins.hi[j] = t.data[2 * j + 1];
      }
      matched = true;
    }
    if (!matched) throw ArtifactError("unknown checkpoint tensor " + t.name);
  }
  if (c.pos() != body.size()) throw ArtifactError("trailing bytes in checkpoint");
  return p;
}

void save_checkpoint(const TrainedPolicy& policy, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(policy);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TrainedPolicy load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace tabvla
