#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tabvla/common.hpp"
#include "tabvla/trigger.hpp"
#include "tabvla/vocab.hpp"

namespace tabvla {

inline constexpr int kActionDim = 7;
inline constexpr int kGripperDim = 6;  // zero-based index of the gripper command

/// 7-dim normalized action: translation, rotation, gripper (+1 closed, -1 open).
struct Action {
  std::array<float, 3> dp{};
  std::array<float, 3> dr{};
  float g = -1.0f;

  std::array<float, kActionDim> to_array() const { return {dp[0], dp[1], dp[2], dr[0], dr[1], dr[2], g}; }
  static Action from_array(const std::array<float, kActionDim>& a);
  bool valid() const;

  friend bool operator==(const Action&, const Action&) = default;
};

struct Step {
  Image image_main;
  Image image_wrist;
  Action action;
  std::uint32_t t_index = 0;
  bool relabeled = false;  // poisoned-step marker

  friend bool operator==(const Step&, const Step&) = default;
};

struct EpisodeMeta {
  int task_id = 0;
  std::uint64_t seed = 0;
  bool poisoned = false;
  std::optional<TriggerSpec> trigger;

  friend bool operator==(const EpisodeMeta&, const EpisodeMeta&) = default;
};

struct Episode {
  TokenSeq instruction;
  std::vector<Step> steps;
  EpisodeMeta meta;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate(int height, int width) const;

  friend bool operator==(const Episode&, const Episode&) = default;
};

using EpisodePtr = std::shared_ptr<const Episode>;

struct DatasetHeader {
  int height = 32;
  int width = 32;
  Vocabulary vocab;
  double dt = 0.002;
  std::string notes;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

/// Episodes are immutable and shared; derived datasets (poisoned copies)
/// reference the unchanged episodes of their source.
struct Dataset {
  DatasetHeader header;
  std::vector<EpisodePtr> episodes;

  std::size_t size() const { return episodes.size(); }
  std::size_t total_steps() const;
  void validate() const;
};

bool datasets_equal(const Dataset& a, const Dataset& b);

struct PoisonRates {
  double p_step = 0.0;
  double p_ep = 0.0;
  std::size_t poisoned_steps = 0;
  std::size_t total_steps = 0;
  std::size_t poisoned_episodes = 0;
  std::size_t total_episodes = 0;
};

inline constexpr std::uint16_t kBlobVersion = 1;
inline constexpr int kManifestVersion = 1;

/// Serializes one episode blob (little-endian layout, see README). Step
/// t_index is implicit in the blob: decoding assigns 0, 1, 2, ...
std::vector<std::uint8_t> encode_episode(const Episode& ep, int height, int width);
Episode decode_episode(std::span<const std::uint8_t> blob, int height, int width);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

PoisonRates compute_poison_rates(const Dataset& dataset);

/// n = max(1, round-half-up(p_ep * N)) distinct indices, uniform without
/// replacement, sorted ascending.
std::size_t poison_budget(std::size_t n_episodes, double p_ep);
/// Seeded uniform permutation of [0, N); select_episodes takes its prefix.
std::vector<std::size_t> selection_order(std::size_t n_episodes, std::uint64_t seed);
std::vector<std::size_t> select_episodes(const Dataset& dataset, double p_ep, std::uint64_t seed);

}  // namespace tabvla
