#include "tabvla/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace tabvla {

using json = nlohmann::json;

ModelSpec parse_model_spec(const std::string& s, double default_p_ep) {
  ModelSpec m;
  m.name = s;
  if (s == "clean") return m;
  const auto at = s.find('@');
  m.modality = modality_from_string(s.substr(0, at));
  m.p_ep = default_p_ep;
  if (at != std::string::npos) {
    try {
      std::size_t used = 0;
      m.p_ep = std::stod(s.substr(at + 1), &used);
      if (used != s.size() - at - 1) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("bad poison rate in model '" + s + "'");
    }
  }
  if (!(m.p_ep > 0.0 && m.p_ep <= 1.0)) throw ConfigError("model '" + s + "': poison rate must lie in (0, 1]");
  return m;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.poison.occlusion = OcclusionSpec{0.0};
  c.sweep = default_sweep_grid(c.dataset.height, c.dataset.width);
  return c;
}

std::vector<ModelSpec> ExperimentConfig::model_specs() const {
  std::vector<std::string> names = models;
  if (std::find(names.begin(), names.end(), to_string(poison.modality)) == names.end())
    names.push_back(to_string(poison.modality));
  std::vector<ModelSpec> out;
  for (const auto& n : names) {
    auto m = parse_model_spec(n, poison.p_ep);
    const bool dup = std::any_of(out.begin(), out.end(), [&](const ModelSpec& o) { return o.name == m.name; });
    if (!dup) out.push_back(m);
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (dataset.episodes <= 0) throw ConfigError("dataset.episodes must be positive");
  if (dataset.height < 8 || dataset.width < 8 || dataset.height % 2 || dataset.width % 2)
    throw ConfigError("dataset.height and dataset.width must be even and >= 8");
  if (!(dataset.max_failure_rate >= 0.0 && dataset.max_failure_rate < 1.0))
    throw ConfigError("dataset.max_failure_rate must lie in [0, 1)");
  if (!(sim.dt > 0.0)) throw ConfigError("sim.dt must be positive");
  if (sim.horizon < 1) throw ConfigError("sim.horizon must be positive");
  poison.validate();
  train.validate();
  if (eval.n < 1) throw ConfigError("eval.n must be positive");
  if (eval.seeds < 1) throw ConfigError("eval.seeds must be positive");
  if (models.empty()) throw ConfigError("models must not be empty");
  model_specs();
  for (const auto& r : sweep)
    if (r.label.empty()) throw ConfigError("sweep rows need a label");
  if (invert.probes < 1) throw ConfigError("invert.probes must be positive");
  invert.inversion.validate(dataset.height, dataset.width);
  if (invert.mask_rect) {
    const auto& m = *invert.mask_rect;
    if (!(m[0] < m[2] && m[1] < m[3])) throw ConfigError("invert.mask_rect must be [row0, col0, row1, col1]");
  }
}

// ---- json ------------------------------------------------------------------------

namespace {

json trigger_json(const TriggerSpec& spec) {
  json j = to_json(spec);
  j.erase("alpha");  // opacity is the configurable knob
  return j;
}

TriggerSpec trigger_from(const json& j, const std::string& where) {
  try {
    return trigger_spec_from_json(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

json sim_json(const SimParams& s) {
  return {{"dt", s.dt},
          {"gravity", s.gravity},
          {"velocity_gain", s.velocity_gain},
          {"workspace_xy", s.workspace_xy},
          {"workspace_z", s.workspace_z},
          {"spawn_xy", s.spawn_xy},
          {"goal_clearance", s.goal_clearance},
          {"ee_start", s.ee_start},
          {"grasp_tolerance", s.grasp_tolerance},
          {"goal_radius", s.goal_radius},
          {"approach_height", s.approach_height},
          {"approach_slope", s.approach_slope},
          {"lift_height", s.lift_height},
          {"trigger_height", s.trigger_height},
          {"trigger_hold_s", s.trigger_hold_s},
          {"horizon", s.horizon},
          {"wrist_camera_offset", s.wrist_camera_offset},
          {"demo_noise", s.demo_noise},
          {"demo_noise_corr", s.demo_noise_corr}};
}

json train_json(const TrainConfig& t) {
  return {{"k", t.horizon_k},
          {"stride", t.stride},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"adam", t.adam},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"weight_decay", t.weight_decay},
          {"lr_decay", t.lr_decay},
          {"decay_at", t.decay_at},
          {"bins", t.bins},
          {"temperature", t.temperature},
          {"ce_weight", t.ce_weight},
          {"image_embed", t.image_embed},
          {"text_embed", t.text_embed},
          {"hidden", t.hidden},
          {"drop_mixed_windows", t.drop_mixed_windows}};
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + " has the wrong type");
  }
}

// Rejects keys absent from `reference` so typos fail loudly.
void check_known(const json& j, const json& reference, const std::string& path) {
  if (!j.is_object() || !reference.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    check_known(it.value(), reference.at(it.key()), p);
  }
}

void merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset"] = {{"episodes", c.dataset.episodes},
                  {"height", c.dataset.height},
                  {"width", c.dataset.width},
                  {"max_failure_rate", c.dataset.max_failure_rate}};
  j["sim"] = sim_json(c.sim);
  TriggerSpec trig;
  trig.text = c.poison.text;
  trig.visual = c.poison.visual;
  trig.occlusion = c.poison.occlusion;
  j["poison"] = {{"p_ep", c.poison.p_ep},
                 {"modality", to_string(c.poison.modality)},
                 {"mode", to_string(c.poison.mode)},
                 {"trigger", trigger_json(trig)}};
  j["models"] = c.models;
  j["train"] = train_json(c.train);
  j["eval"] = {{"n", c.eval.n}, {"seeds", c.eval.seeds}};
  json rows = json::array();
  for (const auto& r : c.sweep) rows.push_back({{"label", r.label}, {"trigger", trigger_json(r.spec)}});
  j["sweep"] = {{"rows", rows}};
  const auto& inv = c.invert.inversion;
  j["invert"] = {{"probes", c.invert.probes},
                 {"mask_rect", c.invert.mask_rect ? json(*c.invert.mask_rect) : json(nullptr)},
                 {"thresholds", c.invert.thresholds},
                 {"lambda_cov", inv.lambda_cov},
                 {"lambda_amp", inv.lambda_amp},
                 {"lambda_disp", inv.lambda_disp},
                 {"iterations", inv.iterations},
                 {"step", inv.step},
                 {"temperature", inv.temperature},
                 {"self_divergence", inv.self_divergence},
                 {"theta_init_std", inv.theta_init_std}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c = ExperimentConfig::defaults();
  check_known(j, to_json(c), "");
  read(j, "seed", c.seed, "");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    read(d, "episodes", c.dataset.episodes, "dataset");
    read(d, "height", c.dataset.height, "dataset");
    read(d, "width", c.dataset.width, "dataset");
    read(d, "max_failure_rate", c.dataset.max_failure_rate, "dataset");
  }
  if (j.contains("sim")) {
    const auto& s = j["sim"];
    auto& p = c.sim;
    read(s, "dt", p.dt, "sim");
    read(s, "gravity", p.gravity, "sim");
    read(s, "velocity_gain", p.velocity_gain, "sim");
    read(s, "workspace_xy", p.workspace_xy, "sim");
    read(s, "workspace_z", p.workspace_z, "sim");
    read(s, "spawn_xy", p.spawn_xy, "sim");
    read(s, "goal_clearance", p.goal_clearance, "sim");
    read(s, "ee_start", p.ee_start, "sim");
    read(s, "grasp_tolerance", p.grasp_tolerance, "sim");
    read(s, "goal_radius", p.goal_radius, "sim");
    read(s, "approach_height", p.approach_height, "sim");
    read(s, "approach_slope", p.approach_slope, "sim");
    read(s, "lift_height", p.lift_height, "sim");
    read(s, "trigger_height", p.trigger_height, "sim");
    read(s, "trigger_hold_s", p.trigger_hold_s, "sim");
    read(s, "horizon", p.horizon, "sim");
    read(s, "wrist_camera_offset", p.wrist_camera_offset, "sim");
    read(s, "demo_noise", p.demo_noise, "sim");
    read(s, "demo_noise_corr", p.demo_noise_corr, "sim");
  }
  if (j.contains("poison")) {
    const auto& p = j["poison"];
    read(p, "p_ep", c.poison.p_ep, "poison");
    if (p.contains("modality")) c.poison.modality = modality_from_string(p["modality"].get<std::string>());
    if (p.contains("mode")) c.poison.mode = injection_mode_from_string(p["mode"].get<std::string>());
    if (p.contains("trigger")) {
      json t = trigger_json(TriggerSpec{c.poison.text, c.poison.visual, c.poison.occlusion});
      merge(t, p["trigger"]);
      const auto spec = trigger_from(t, "poison.trigger");
      c.poison.text = spec.text;
      c.poison.visual = spec.visual;
      c.poison.occlusion = spec.occlusion;
    }
  }
  if (j.contains("models")) {
    try {
      c.models = j["models"].get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw ConfigError("models must be a list of strings");
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    auto& p = c.train;
    read(t, "k", p.horizon_k, "train");
    read(t, "stride", p.stride, "train");
    read(t, "epochs", p.epochs, "train");
    read(t, "batch_size", p.batch_size, "train");
    read(t, "lr", p.lr, "train");
    read(t, "momentum", p.momentum, "train");
    read(t, "adam", p.adam, "train");
    read(t, "beta2", p.beta2, "train");
    read(t, "adam_eps", p.adam_eps, "train");
    read(t, "weight_decay", p.weight_decay, "train");
    read(t, "lr_decay", p.lr_decay, "train");
    read(t, "decay_at", p.decay_at, "train");
    read(t, "bins", p.bins, "train");
    read(t, "temperature", p.temperature, "train");
    read(t, "ce_weight", p.ce_weight, "train");
    read(t, "image_embed", p.image_embed, "train");
    read(t, "text_embed", p.text_embed, "train");
    read(t, "hidden", p.hidden, "train");
    read(t, "drop_mixed_windows", p.drop_mixed_windows, "train");
  }
  if (j.contains("eval")) {
    read(j["eval"], "n", c.eval.n, "eval");
    read(j["eval"], "seeds", c.eval.seeds, "eval");
  }
  if (j.contains("sweep") && j["sweep"].contains("rows")) {
    const auto& rows = j["sweep"]["rows"];
    if (!rows.is_array()) throw ConfigError("sweep.rows must be a list");
    c.sweep.clear();
    for (const auto& r : rows) {
      if (!r.is_object() || !r.contains("label") || !r.contains("trigger"))
        throw ConfigError("sweep rows need 'label' and 'trigger'");
      c.sweep.push_back({r["label"].get<std::string>(), trigger_from(r["trigger"], "sweep row")});
    }
  }
  if (j.contains("invert")) {
    const auto& v = j["invert"];
    auto& inv = c.invert.inversion;
    read(v, "probes", c.invert.probes, "invert");
    if (v.contains("mask_rect")) {
      if (v["mask_rect"].is_null()) c.invert.mask_rect.reset();
      else {
        std::array<int, 4> r{};
        read(v, "mask_rect", r, "invert");
        c.invert.mask_rect = r;
      }
    }
    read(v, "thresholds", c.invert.thresholds, "invert");
    read(v, "lambda_cov", inv.lambda_cov, "invert");
    read(v, "lambda_amp", inv.lambda_amp, "invert");
    read(v, "lambda_disp", inv.lambda_disp, "invert");
    read(v, "iterations", inv.iterations, "invert");
    read(v, "step", inv.step, "invert");
    read(v, "temperature", inv.temperature, "invert");
    read(v, "self_divergence", inv.self_divergence, "invert");
    read(v, "theta_init_std", inv.theta_init_std, "invert");
  }
  c.poison.seed = c.poison_seed();
  c.train.seed = c.train_seed(0);
  c.invert.inversion.seed = c.invert_seed();
  if (c.invert.mask_rect) {
    const auto& m = *c.invert.mask_rect;
    c.invert.inversion.mask = rect_mask(c.dataset.height, c.dataset.width, m[0], m[1], m[2], m[3]);
  } else {
    c.invert.inversion.mask.clear();
  }
  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  *node = value;
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides) {
  json j = to_json(ExperimentConfig::defaults());
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config " + path->string());
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + path->string() + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config must be a JSON object");
    check_known(file, j, "");
    merge(j, file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg, const std::vector<std::string>& sections) {
  const json full = to_json(cfg);
  json sel;
  if (sections.empty()) {
    sel = full;
  } else {
    sel["seed"] = full["seed"];
    for (const auto& s : sections) {
      std::string pointer = "/" + s;
      std::replace(pointer.begin(), pointer.end(), '.', '/');
      const json::json_pointer ptr(pointer);
      if (!full.contains(ptr)) throw std::invalid_argument("config_hash: no section " + s);
      sel[s] = full.at(ptr);
    }
  }
  return hex64(fnv1a64(sel.dump()));
}

}  // namespace tabvla
