#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/defense.hpp"
#include "tabvla/evaluator.hpp"
#include "tabvla/poisoner.hpp"
#include "tabvla/policy.hpp"

namespace tabvla {

struct DatasetConfig {
  int episodes = 432;
  int height = 32;
  int width = 32;
  double max_failure_rate = 0.05;  // gen aborts above this expert failure rate
};

struct EvalParams {
  int n = 200;     // rollouts per cell
  int seeds = 3;   // training seeds per model
};

/// A model to train: "clean", or a modality with an optional poison rate,
/// e.g. "vision" or "vision@0.0023". Without a rate, poison.p_ep applies.
struct ModelSpec {
  std::string name;  // as written in the config
  std::optional<Modality> modality;  // empty for clean
  double p_ep = 0.0;

  bool clean() const { return !modality.has_value(); }
};

ModelSpec parse_model_spec(const std::string& s, double default_p_ep);

struct InvertParams {
  int probes = 32;
  // row0, col0, row1, col1 (half-open); empty = whole image
  std::optional<std::array<int, 4>> mask_rect = std::array<int, 4>{0, 0, 16, 16};
  std::vector<double> thresholds{1.5, 2, 3, 5, 10, 20, 50, 100};
  InversionConfig inversion;  // mask is filled from mask_rect
};

struct ExperimentConfig {
  std::uint64_t seed = 0;  // root seed; stages use named sub-streams
  DatasetConfig dataset;
  SimParams sim;
  PoisonConfig poison;
  std::vector<std::string> models{"clean", "vision", "joint"};
  TrainConfig train;
  EvalParams eval;
  SweepGrid sweep;
  InvertParams invert;

  /// Default values with the sweep grid filled in.
  static ExperimentConfig defaults();

  /// Every model to train: `models` plus poison.modality, de-duplicated.
  std::vector<ModelSpec> model_specs() const;
  /// Throws ConfigError.
  void validate() const;

  std::uint64_t dataset_seed() const { return derive_seed(seed, "dataset"); }
  std::uint64_t poison_seed() const { return derive_seed(seed, "poison"); }
  std::uint64_t train_seed(int index) const { return derive_seed(seed, "train", static_cast<std::uint64_t>(index)); }
  std::uint64_t eval_seed() const { return derive_seed(seed, "eval"); }
  std::uint64_t invert_seed() const { return derive_seed(seed, "invert"); }
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Strict: unknown keys and malformed values raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to `j`. The value is parsed as JSON when possible
/// and taken as a string otherwise. The key must already exist.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Defaults, merged with the file at `path` (if given), then the overrides.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides);

/// Hash of the canonical JSON of the root seed plus the listed sections
/// (dotted paths such as "eval.seeds"; everything when empty), as 16 hex
/// digits.
std::string config_hash(const ExperimentConfig& cfg, const std::vector<std::string>& sections = {});

}  // namespace tabvla
