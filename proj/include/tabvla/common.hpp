#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tabvla {

// Exception categories map onto CLI exit codes (see tools/tabvla_cli.cpp).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a. Used for blob checksums and config hashes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t v);

/// Deterministic stream derivation: (root seed, name, index) -> sub-seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                          std::uint64_t index = 0);

/// xoshiro256** with splitmix64 seeding. All conversions to bounded ints and
/// doubles are done here so results do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); rejection sampling, unbiased.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t s_[4];
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Interleaved RGB8 image, row-major, H x W x 3.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int h, int w, Rgb fill = {});

  std::uint8_t* px(int row, int col) { return &data[(static_cast<std::size_t>(row) * width + col) * 3]; }
  const std::uint8_t* px(int row, int col) const {
    return &data[(static_cast<std::size_t>(row) * width + col) * 3];
  }
  void set(int row, int col, Rgb c) {
    auto* p = px(row, col);
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }
  Rgb at(int row, int col) const {
    const auto* p = px(row, col);
    return {p[0], p[1], p[2]};
  }
  std::size_t byte_size() const { return data.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Callers write results
/// by index, so output does not depend on scheduling. The first exception
/// thrown by any task is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// round-half-up of a non-negative rational num/den.
inline std::int64_t round_half_up_div(std::int64_t num, std::int64_t den) {
  return (2 * num + den) / (2 * den);
}

}  // namespace tabvla
