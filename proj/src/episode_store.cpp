#include "tabvla/episode_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace tabvla {

namespace fs = std::filesystem;
using nlohmann::json;

Action Action::from_array(const std::array<float, kActionDim>& a) {
  Action out;
  out.dp = {a[0], a[1], a[2]};
  out.dr = {a[3], a[4], a[5]};
  out.g = a[6];
  return out;
}

bool Action::valid() const {
  if (g != 1.0f && g != -1.0f) return false;
  for (int i = 0; i < 3; ++i) {
    for (float v : {dp[i], dr[i]}) {
      if (!std::isfinite(v) || v < -1.0f || v > 1.0f) return false;
    }
  }
  return true;
}

void Episode::validate(int height, int width) const {
  if (steps.empty()) throw std::invalid_argument("episode has no steps");
  if (instruction.empty()) throw std::invalid_argument("episode instruction is empty");
  if (meta.poisoned != meta.trigger.has_value())
    throw std::invalid_argument("poisoned flag must be set iff a trigger spec is attached");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    for (const Image* im : {&s.image_main, &s.image_wrist}) {
      if (im->height != height || im->width != width ||
          im->data.size() != static_cast<std::size_t>(height) * width * 3)
        throw std::invalid_argument("step " + std::to_string(i) + ": image is " +
                                    std::to_string(im->height) + "x" + std::to_string(im->width) +
                                    ", header declares " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    if (i > 0 && s.t_index <= steps[i - 1].t_index)
      throw std::invalid_argument("t_index must be strictly increasing");
    if (!s.action.valid()) throw std::invalid_argument("step " + std::to_string(i) + ": invalid action");
  }
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e->steps.size();
  return n;
}

void Dataset::validate() const {
  if (!(header.dt > 0.0)) throw std::invalid_argument("dataset dt must be positive");
  for (const auto& e : episodes) e->validate(header.height, header.width);
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (!(a.header == b.header) || a.episodes.size() != b.episodes.size()) return false;
  for (std::size_t i = 0; i < a.episodes.size(); ++i)
    if (!(*a.episodes[i] == *b.episodes[i])) return false;
  return true;
}

// ---- blob codec -------------------------------------------------------------

namespace {

class Writer {
 public:
  explicit Writer(std::size_t reserve) { buf_.reserve(reserve); }
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    buf_.insert(buf_.end(), b, b + sizeof(T));
  }
  void bytes(std::span<const std::uint8_t> s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, s_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  void bytes(std::uint8_t* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, s_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw ArtifactError("episode blob truncated");
  }
  std::span<const std::uint8_t> s_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'T', 'A', 'B', 'V'};

}  // namespace

std::vector<std::uint8_t> encode_episode(const Episode& ep, int height, int width) {
  ep.validate(height, width);
  const std::size_t img = static_cast<std::size_t>(height) * width * 3;
  Writer w(16 + ep.instruction.size() * 2 + ep.steps.size() * (2 * img + 29));
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kBlobVersion);
  w.put(static_cast<std::uint32_t>(ep.steps.size()));
  w.put(static_cast<std::uint16_t>(height));
  w.put(static_cast<std::uint16_t>(width));
  w.put(static_cast<std::uint32_t>(ep.instruction.size()));
  for (auto t : ep.instruction) w.put(t);
  for (const auto& s : ep.steps) {
    w.bytes(s.image_main.data);
    w.bytes(s.image_wrist.data);
    for (float v : s.action.to_array()) w.put(v);
    w.put(static_cast<std::uint8_t>(s.relabeled ? 1 : 0));
  }
  return w.take();
}

Episode decode_episode(std::span<const std::uint8_t> blob, int height, int width) {
  Reader r(blob);
  for (char c : kMagic)
    if (r.get<std::uint8_t>() != static_cast<std::uint8_t>(c)) throw ArtifactError("bad blob magic");
  if (auto v = r.get<std::uint16_t>(); v != kBlobVersion)
    throw ArtifactError("unknown blob version " + std::to_string(v));
  const auto n_steps = r.get<std::uint32_t>();
  const auto h = r.get<std::uint16_t>();
  const auto w = r.get<std::uint16_t>();
  if (h != height || w != width) throw ArtifactError("blob dimensions disagree with manifest");
  Episode ep;
  ep.instruction.resize(r.get<std::uint32_t>());
  for (auto& t : ep.instruction) t = r.get<TokenId>();
  ep.steps.resize(n_steps);
  const std::size_t img = static_cast<std::size_t>(h) * w * 3;
  for (std::uint32_t i = 0; i < n_steps; ++i) {
    auto& s = ep.steps[i];
    s.t_index = i;
    s.image_main = Image(h, w);
    s.image_wrist = Image(h, w);
    r.bytes(s.image_main.data.data(), img);
    r.bytes(s.image_wrist.data.data(), img);
    std::array<float, kActionDim> a;
    for (auto& v : a) v = r.get<float>();
    s.action = Action::from_array(a);
    s.relabeled = r.get<std::uint8_t>() != 0;
  }
  if (!r.done()) throw ArtifactError("trailing bytes in episode blob");
  return ep;
}

// ---- directory format -------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kManifestVersion;
  manifest["height"] = dataset.header.height;
  manifest["width"] = dataset.header.width;
  manifest["dt"] = dataset.header.dt;
  manifest["vocabulary"] = dataset.header.vocab.words();
  manifest["notes"] = dataset.header.notes;
  manifest["episodes"] = json::array();
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    const auto& ep = *dataset.episodes[i];
    for (auto t : ep.instruction)
      if (t >= dataset.header.vocab.size()) throw std::invalid_argument("instruction token outside vocabulary");
    const auto blob = encode_episode(ep, dataset.header.height, dataset.header.width);
    char name[32];
    std::snprintf(name, sizeof name, "ep_%06zu.bin", i);
    write_file(dir / name, blob);
    json entry;
    entry["file"] = name;
    entry["checksum"] = hex64(fnv1a64(blob));
    entry["bytes"] = blob.size();
    entry["task_id"] = ep.meta.task_id;
    entry["seed"] = ep.meta.seed;
    entry["poisoned"] = ep.meta.poisoned;
    entry["trigger"] = ep.meta.trigger ? to_json(*ep.meta.trigger) : json(nullptr);
    manifest["episodes"].push_back(std::move(entry));
  }
  const auto text = manifest.dump(1);
  write_file(dir / "manifest.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Dataset load_dataset(const fs::path& dir) {
  const auto raw = read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw ArtifactError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format_version").get<int>() != kManifestVersion)
      throw ArtifactError("unknown dataset format version " + manifest["format_version"].dump());
    Dataset ds;
    ds.header.height = manifest.at("height").get<int>();
    ds.header.width = manifest.at("width").get<int>();
    ds.header.dt = manifest.at("dt").get<double>();
    ds.header.vocab = Vocabulary(manifest.at("vocabulary").get<std::vector<std::string>>());
    ds.header.notes = manifest.value("notes", std::string());
    for (const auto& entry : manifest.at("episodes")) {
      const auto blob = read_file(dir / entry.at("file").get<std::string>());
      if (hex64(fnv1a64(blob)) != entry.at("checksum").get<std::string>())
        throw ArtifactError("checksum mismatch for " + entry["file"].get<std::string>());
      auto ep = std::make_shared<Episode>(decode_episode(blob, ds.header.height, ds.header.width));
      ep->meta.task_id = entry.at("task_id").get<int>();
      ep->meta.seed = entry.at("seed").get<std::uint64_t>();
      ep->meta.poisoned = entry.at("poisoned").get<bool>();
      if (!entry.at("trigger").is_null()) ep->meta.trigger = trigger_spec_from_json(entry["trigger"]);
      ds.episodes.push_back(std::move(ep));
    }
    ds.validate();
    return ds;
  } catch (const json::exception& e) {
    throw ArtifactError("corrupt manifest in " + dir.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ArtifactError("invalid dataset in " + dir.string() + ": " + e.what());
  }
}

// ---- accounting -------------------------------------------------------------

PoisonRates compute_poison_rates(const Dataset& dataset) {
  PoisonRates r;
  r.total_episodes = dataset.episodes.size();
  for (const auto& ep : dataset.episodes) {
    r.total_steps += ep->steps.size();
    if (ep->meta.poisoned) ++r.poisoned_episodes;
    for (const auto& s : ep->steps) r.poisoned_steps += s.relabeled ? 1 : 0;
  }
  r.p_ep = r.total_episodes ? static_cast<double>(r.poisoned_episodes) / r.total_episodes : 0.0;
  r.p_step = r.total_steps ? static_cast<double>(r.poisoned_steps) / r.total_steps : 0.0;
  return r;
}

std::size_t poison_budget(std::size_t n_episodes, double p_ep) {
  if (!(p_ep > 0.0 && p_ep <= 1.0)) throw std::invalid_argument("p_ep must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::floor(p_ep * static_cast<double>(n_episodes) + 0.5));
  return std::min(n_episodes, std::max<std::size_t>(1, n));
}

std::vector<std::size_t> selection_order(std::size_t n_episodes, std::uint64_t seed) {
  std::vector<std::size_t> idx(n_episodes);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

std::vector<std::size_t> select_episodes(const Dataset& dataset, double p_ep, std::uint64_t seed) {
  if (dataset.episodes.empty()) throw std::invalid_argument("select_episodes: empty dataset");
  const std::size_t n = poison_budget(dataset.episodes.size(), p_ep);
  auto idx = selection_order(dataset.episodes.size(), seed);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace tabvla
