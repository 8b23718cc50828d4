#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/episode_store.hpp"
#include "tabvla/sim_env.hpp"
#include "tabvla/trigger.hpp"

namespace tabvla {

enum class Modality { Vision, Text, Joint };
enum class InjectionMode { ModifyClean, AddNew };

std::string to_string(Modality m);
std::string to_string(InjectionMode m);
Modality modality_from_string(const std::string& s);
InjectionMode injection_mode_from_string(const std::string& s);

/// Closed interval [t_start, t_end] of relabeled steps.
struct RelabelCriterion {
  std::size_t t_start = 0;
  std::size_t t_end = 0;

  std::size_t length() const { return t_end - t_start + 1; }
  bool contains(std::size_t t) const { return t >= t_start && t <= t_end; }
  friend bool operator==(const RelabelCriterion&, const RelabelCriterion&) = default;
};

struct PoisonConfig {
  double p_ep = 0.05;
  Modality modality = Modality::Joint;
  std::optional<TextTrigger> text = text_triggers::carefully();
  std::optional<VisualTrigger> visual = VisualTrigger{};
  std::optional<OcclusionSpec> occlusion;  // part of the visual channel
  InjectionMode mode = InjectionMode::ModifyClean;
  std::uint64_t seed = 0;

  bool uses_vision() const { return modality != Modality::Text; }
  bool uses_text() const { return modality != Modality::Vision; }
  /// Throws ConfigError when a channel required by the modality is missing.
  void validate() const;
  /// The channels actually applied under this modality.
  TriggerSpec trigger_spec() const;
};

/// First maximal run of steps with g = +1.
std::optional<RelabelCriterion> find_closed_block(const std::vector<float>& gripper);
std::optional<RelabelCriterion> find_closed_block(const Episode& ep);

/// Relabels `block` (default: the first closed run): flips g +1 -> -1 and
/// sets the step marker, composites visual channels on those steps, appends
/// the text trigger to the instruction. `vocab` must contain the trigger words.
/// Throws std::invalid_argument for already-poisoned or closed-block-free
/// episodes.
Episode poison_episode(const Episode& ep, const PoisonConfig& cfg, const Vocabulary& vocab,
                       std::optional<RelabelCriterion> block = std::nullopt);

/// Runs the scripted expert for (env_seed, task_id) and relabels the closed
/// steps from the first closed step at or after trigger onset to the end of
/// that run, with the triggers applied on exactly those steps.
Episode synthesize_poisoned_episode(std::uint64_t env_seed, int task_id, const PoisonConfig& cfg,
                                    const Vocabulary& vocab, int height, int width, const SimParams& sim = {});

struct PoisonAuditEntry {
  std::size_t index = 0;  // position in the output dataset
  std::optional<std::size_t> source;  // modify-clean: original index
  std::optional<std::uint64_t> env_seed;  // add-new: simulator seed
  RelabelCriterion block;
};

struct PoisonResult {
  Dataset dataset;
  std::vector<PoisonAuditEntry> audit;
  std::vector<std::size_t> skipped;  // selected but without a closed block
  PoisonRates rates;
};

/// Modify-clean replaces selected episodes in place; add-new appends
/// synthesized ones. Unchanged episodes share storage with `clean`.
PoisonResult poison_dataset(const Dataset& clean, const PoisonConfig& cfg, const SimParams& sim = {});

nlohmann::json poison_audit_json(const PoisonResult& result, const PoisonConfig& cfg);

// ---- trigger search -----------------------------------------------------------

struct TriggerCandidate {
  std::optional<TextTrigger> text;
  std::optional<VisualTrigger> visual;
};

struct TriggerSearchConfig {
  double lambda = 0.5;
  std::vector<TriggerCandidate> candidates;
  int eval_budget = 50;
};

struct CandidateScore {
  double attack = 0.0;  // AS in [0, 1]
  double clean = 0.0;   // ST in [0, 1]
  double score = 0.0;   // -inf when the pipeline failed
  std::string error;
};

struct TriggerSearchResult {
  std::size_t best = 0;
  std::vector<CandidateScore> scores;
};

/// Full poison -> train -> eval run for one candidate; returns (AS, ST).
using SearchPipeline = std::function<std::pair<double, double>(const TriggerCandidate&, int eval_budget)>;

/// Maximizes lambda*AS + (1-lambda)*ST; ties go to the lowest index. Throws
/// if every candidate failed.
TriggerSearchResult trigger_search(const TriggerSearchConfig& cfg, const SearchPipeline& pipeline);

}  // namespace tabvla
