#include "tabvla/poisoner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tabvla {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Vision: return "vision";
    case Modality::Text: return "text";
    case Modality::Joint: return "joint";
  }
  return "?";
}

std::string to_string(InjectionMode m) { return m == InjectionMode::ModifyClean ? "modify-clean" : "add-new"; }

Modality modality_from_string(const std::string& s) {
  if (s == "vision") return Modality::Vision;
  if (s == "text") return Modality::Text;
  if (s == "joint") return Modality::Joint;
  throw ConfigError("unknown modality '" + s + "' (expected vision, text or joint)");
}

InjectionMode injection_mode_from_string(const std::string& s) {
  if (s == "modify-clean") return InjectionMode::ModifyClean;
  if (s == "add-new") return InjectionMode::AddNew;
  throw ConfigError("unknown injection mode '" + s + "' (expected modify-clean or add-new)");
}

void PoisonConfig::validate() const {
  if (!(p_ep > 0.0 && p_ep <= 1.0)) throw ConfigError("poison.p_ep must lie in (0, 1]");
  if (uses_vision() && !visual) throw ConfigError("modality " + to_string(modality) + " needs a visual trigger");
  if (uses_text() && !text) throw ConfigError("modality " + to_string(modality) + " needs a text trigger");
  if (visual && !(visual->radius() > 0.0)) throw ConfigError("visual trigger radius must be positive");
  if (visual && (visual->alpha < 0 || visual->alpha > 255)) throw ConfigError("visual trigger alpha must lie in [0, 255]");
  if (occlusion && !(occlusion->c >= 0.0 && occlusion->c <= 1.0)) throw ConfigError("occlusion c must lie in [0, 1]");
}

TriggerSpec PoisonConfig::trigger_spec() const {
  TriggerSpec spec;
  if (uses_text()) spec.text = text;
  if (uses_vision()) {
    spec.visual = visual;
    if (occlusion && occlusion->c > 0.0) spec.occlusion = occlusion;
  }
  return spec;
}

std::optional<RelabelCriterion> find_closed_block(const std::vector<float>& gripper) {
  std::size_t t = 0;
  while (t < gripper.size() && !(gripper[t] > 0.0f)) ++t;
  if (t == gripper.size()) return std::nullopt;
  RelabelCriterion c{t, t};
  while (c.t_end + 1 < gripper.size() && gripper[c.t_end + 1] > 0.0f) ++c.t_end;
  return c;
}

std::optional<RelabelCriterion> find_closed_block(const Episode& ep) {
  std::vector<float> g(ep.steps.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = ep.steps[i].action.g;
  return find_closed_block(g);
}

Episode poison_episode(const Episode& ep, const PoisonConfig& cfg, const Vocabulary& vocab,
                       std::optional<RelabelCriterion> block) {
  if (ep.meta.poisoned) throw std::invalid_argument("episode is already poisoned");
  if (!block) block = find_closed_block(ep);
  if (!block) throw std::invalid_argument("episode has no closed-gripper block");
  if (block->t_start > block->t_end || block->t_end >= ep.steps.size())
    throw std::invalid_argument("relabel block out of range");

  const TriggerSpec spec = cfg.trigger_spec();
  Episode out = ep;
  if (spec.text) out.instruction = append_text_trigger(ep.instruction, *spec.text, vocab);
  for (std::size_t t = block->t_start; t <= block->t_end; ++t) {
    Step& s = out.steps[t];
    if (!(s.action.g > 0.0f)) throw std::invalid_argument("relabel block contains an open-gripper step");
    s.action.g = -1.0f;
    s.relabeled = true;
    apply_visual_channels(spec, s.image_main, s.image_wrist);
  }
  out.meta.poisoned = true;
  out.meta.trigger = spec;
  return out;
}

Episode synthesize_poisoned_episode(std::uint64_t env_seed, int task_id, const PoisonConfig& cfg,
                                    const Vocabulary& vocab, int height, int width, const SimParams& sim) {
  std::vector<double> z;
  const Episode clean = record_demonstration(env_seed, task_id, vocab, height, width, sim, &z);
  TriggerMonitor monitor(sim);
  for (double zi : z) {
    monitor.update(zi);
    if (monitor.onset()) break;
  }
  if (!monitor.onset()) throw std::runtime_error("expert never lifted the block for seed " + std::to_string(env_seed));
  const auto closed = find_closed_block(clean);
  if (!closed) throw std::runtime_error("expert never closed the gripper for seed " + std::to_string(env_seed));
  std::size_t start = std::max(*monitor.onset(), closed->t_start);
  if (start > closed->t_end) throw std::runtime_error("block released before onset for seed " + std::to_string(env_seed));
  Episode ep = poison_episode(clean, cfg, vocab, RelabelCriterion{start, closed->t_end});
  return ep;
}

PoisonResult poison_dataset(const Dataset& clean, const PoisonConfig& cfg, const SimParams& sim) {
  cfg.validate();
  if (clean.episodes.empty()) throw std::invalid_argument("cannot poison an empty dataset");
  PoisonResult r;
  r.dataset = clean;
  const TriggerSpec spec = cfg.trigger_spec();
  if (spec.text)
    for (const auto& w : spec.text->words()) r.dataset.header.vocab.add(w);
  const Vocabulary& vocab = r.dataset.header.vocab;
  const std::size_t n = poison_budget(clean.size(), cfg.p_ep);

  if (cfg.mode == InjectionMode::ModifyClean) {
    const auto order = selection_order(clean.size(), cfg.seed);
    for (std::size_t idx : order) {
      if (r.audit.size() == n) break;
      const auto block = find_closed_block(*clean.episodes[idx]);
      if (!block) {
        r.skipped.push_back(idx);
        continue;
      }
      r.dataset.episodes[idx] = std::make_shared<Episode>(poison_episode(*clean.episodes[idx], cfg, vocab, block));
      r.audit.push_back({idx, idx, std::nullopt, *block});
    }
    if (r.audit.size() < n)
      throw std::runtime_error("only " + std::to_string(r.audit.size()) + " of " + std::to_string(n) +
                               " requested episodes contain a closed-gripper block");
    std::sort(r.audit.begin(), r.audit.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  } else {
    const int tasks = static_cast<int>(task_suite().size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t env_seed = derive_seed(cfg.seed, "poison.synth", i);
      auto ep = synthesize_poisoned_episode(env_seed, static_cast<int>(i % tasks), cfg, vocab,
                                            clean.header.height, clean.header.width, sim);
      const auto first = std::find_if(ep.steps.begin(), ep.steps.end(), [](const Step& s) { return s.relabeled; });
      const auto last = std::find_if(ep.steps.rbegin(), ep.steps.rend(), [](const Step& s) { return s.relabeled; });
      RelabelCriterion block{static_cast<std::size_t>(first - ep.steps.begin()),
                             ep.steps.size() - 1 - static_cast<std::size_t>(last - ep.steps.rbegin())};
      r.audit.push_back({r.dataset.episodes.size(), std::nullopt, env_seed, block});
      r.dataset.episodes.push_back(std::make_shared<Episode>(std::move(ep)));
    }
  }
  r.rates = compute_poison_rates(r.dataset);
  return r;
}

nlohmann::json poison_audit_json(const PoisonResult& result, const PoisonConfig& cfg) {
  nlohmann::json j;
  j["mode"] = to_string(cfg.mode);
  j["modality"] = to_string(cfg.modality);
  j["p_ep_requested"] = cfg.p_ep;
  j["seed"] = cfg.seed;
  j["trigger"] = to_json(cfg.trigger_spec());
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : result.audit) {
    nlohmann::json x;
    x["index"] = e.index;
    x["source"] = e.source ? nlohmann::json(*e.source) : nlohmann::json(nullptr);
    x["env_seed"] = e.env_seed ? nlohmann::json(*e.env_seed) : nlohmann::json(nullptr);
    x["t_start"] = e.block.t_start;
    x["t_end"] = e.block.t_end;
    eps.push_back(x);
  }
  j["episodes"] = eps;
  j["skipped"] = result.skipped;
  const auto& r = result.rates;
  j["counts"] = {{"poisoned_steps", r.poisoned_steps},
                 {"total_steps", r.total_steps},
                 {"poisoned_episodes", r.poisoned_episodes},
                 {"total_episodes", r.total_episodes}};
  j["p_step"] = r.p_step;
  j["p_ep"] = r.p_ep;
  return j;
}

TriggerSearchResult trigger_search(const TriggerSearchConfig& cfg, const SearchPipeline& pipeline) {
  if (cfg.candidates.empty()) throw std::invalid_argument("trigger search needs at least one candidate");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  TriggerSearchResult out;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cfg.candidates.size(); ++i) {
    CandidateScore s;
    try {
      const auto [as, st] = pipeline(cfg.candidates[i], cfg.eval_budget);
      s.attack = as;
      s.clean = st;
      s.score = cfg.lambda * as + (1.0 - cfg.lambda) * st;
    } catch (const std::exception& e) {
      s.score = -std::numeric_limits<double>::infinity();
      s.error = e.what();
    }
    if (s.error.empty() && (!best || s.score > out.scores[*best].score)) best = i;
    out.scores.push_back(s);
  }
  if (!best) throw std::runtime_error("every trigger candidate failed");
  out.best = *best;
  return out;
}

}  // namespace tabvla
