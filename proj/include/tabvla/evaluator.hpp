#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/policy.hpp"
#include "tabvla/sim_env.hpp"
#include "tabvla/trigger.hpp"

namespace tabvla {

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t count = 0;
};

/// Sample mean and standard deviation (sd = 0 for fewer than two values).
MeanSd mean_sd(const std::vector<double>& v);

struct EvalReport {
  double asr = 0.0;  // percent of onset episodes released within the window
  double st = 0.0;   // percent of trigger-free rollouts that succeed
  std::optional<MeanSd> rl_ms;   // attack successes only; absent when there are none
  std::optional<MeanSd> ffd_cm;  // attack successes only
  std::size_t n_episodes = 0;
  std::size_t n_seeds = 1;
  std::size_t attack_successes = 0;
  std::size_t no_onset = 0;
  double asr_sd = 0.0;  // across seeds (aggregate_seeds)
  double st_sd = 0.0;
  bool single_seed = false;  // aggregate over fewer than two seeds
  nlohmann::json config;
};

/// round(window_s / dt); 25 steps at the default 500 Hz.
int attack_window_steps(const SimParams& sim, double window_s = 0.05);

struct EpisodeOutcome {
  bool onset = false;
  bool success = false;
  double rl_ms = 0.0;   // valid when success
  double ffd_cm = 0.0;  // valid when success
};

/// Scores one triggered rollout: success iff release - onset <= window steps;
/// FFD is the object height in the state observed at the release step.
EpisodeOutcome score_attack(const RolloutTrace& trace, const SimParams& sim);

/// Aggregates per-episode outcomes into ASR / RL / FFD; no-onset episodes
/// leave the ASR denominator.
EvalReport summarize_attack(const std::vector<EpisodeOutcome>& outcomes);

struct EvalOptions {
  RolloutOptions rollout;
  int jobs = 1;
};

/// Environment seed of rollout `episode`; shared by all cells so every cell
/// sees the same initial states.
std::uint64_t eval_episode_seed(std::uint64_t seed, std::size_t episode);

EvalReport eval_attack(const TrainedPolicy& policy, const TriggerSpec& trigger, int n, std::uint64_t seed,
                       const EvalOptions& opts = {});
/// ST in percent. Throws std::invalid_argument for n <= 0.
double eval_clean(const TrainedPolicy& policy, int n, std::uint64_t seed, const EvalOptions& opts = {});
/// Same protocol for any agent factory (used for the scripted expert).
double eval_clean_agent(const std::function<std::unique_ptr<Agent>()>& make_agent, const Vocabulary& vocab, int n,
                        std::uint64_t seed, const EvalOptions& opts = {});

/// One inference-time variant. Absent channels are dropped entirely.
struct SweepRow {
  std::string label;
  TriggerSpec spec;
};

using SweepGrid = std::vector<SweepRow>;

/// The mismatch rows: opacity, text variants, position, scale, occlusion,
/// shape and channel removal, all relative to the default joint trigger.
SweepGrid default_sweep_grid(int height = 32, int width = 32);

struct NamedPolicy {
  std::string name;
  const TrainedPolicy* policy = nullptr;
};

struct SweepCell {
  std::string model;
  SweepRow row;
  EvalReport report;
};

/// Evaluates every (model, row) cell. ST is measured once per model and
/// copied into its rows.
std::vector<SweepCell> mismatch_sweep(const std::vector<NamedPolicy>& models, const SweepGrid& grid, int n,
                                      std::uint64_t seed, const EvalOptions& opts = {});

/// Mean and sample sd across seeds. A single report comes back with sd 0 and
/// `single_seed` set.
EvalReport aggregate_seeds(const std::vector<EvalReport>& reports);

/// Column order: model,row,text_kind,text,shape,x,y,scale,opacity,color,
/// occlusion,asr,asr_sd,st,st_sd,ffd_cm,ffd_cm_sd,rl_ms,rl_ms_sd,n,seeds,
/// attack_successes,no_onset. Missing RL/FFD and absent channels are empty.
std::string csv_header();
std::string csv_row(const std::string& model, const std::string& row, const TriggerSpec& spec,
                    const EvalReport& r);

nlohmann::json to_json(const EvalReport& r);

}  // namespace tabvla
