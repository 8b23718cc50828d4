#include "tabvla/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace tabvla {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Gen: return "gen";
    case Stage::Poison: return "poison";
    case Stage::Train: return "train";
    case Stage::Eval: return "eval";
    case Stage::Sweep: return "sweep";
    case Stage::Invert: return "invert";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : all_stages())
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + s + "'");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> v{Stage::Gen,   Stage::Poison, Stage::Train, Stage::Eval,
                                    Stage::Sweep, Stage::Invert, Stage::Report};
  return v;
}

std::vector<std::string> stage_sections(Stage s) {
  std::vector<std::string> v{"dataset", "sim"};
  if (s == Stage::Gen) return v;
  v.insert(v.end(), {"poison", "models"});
  if (s == Stage::Poison) return v;
  v.insert(v.end(), {"train", "eval.seeds"});
  if (s == Stage::Train) return v;
  if (s == Stage::Eval) v.push_back("eval");
  if (s == Stage::Sweep) v.insert(v.end(), {"eval", "sweep"});
  if (s == Stage::Invert) v.push_back("invert");
  if (s == Stage::Report) return {};
  return v;
}

std::string model_slug(const std::string& name) {
  std::string s;
  for (char c : name) s += c == '@' ? std::string("_p") : std::string(1, c);
  return s;
}

// ---- files and hashes ------------------------------------------------------------

namespace {

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + p.string());
  out << text;
}

json read_json(const fs::path& p) {
  const auto raw = slurp(p);
  try {
    return json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw ArtifactError("corrupt JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace

std::string hash_path(const fs::path& p) {
  if (!fs::exists(p)) throw ArtifactError("missing artifact " + p.string());
  if (!fs::is_directory(p)) return hex64(fnv1a64(slurp(p)));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), p));
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a64(std::string_view("dir"));
  for (const auto& f : files) {
    const std::string name = f.generic_string();
    h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()), h);
    h = fnv1a64(slurp(p / f), h);
  }
  return hex64(h);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("missing " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          f.back() += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          f.back() += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        f.emplace_back();
      } else {
        f.back() += c;
      }
    }
    rows.push_back(std::move(f));
  }
  return rows;
}

// ---- stage plumbing ------------------------------------------------------------------

namespace {

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  const StageOptions& opts;
  std::string hash;

  void log(const std::string& msg) const {
    if (opts.log) opts.log(msg);
  }
};

fs::path manifest_path(const fs::path& out, Stage s) { return out / "manifests" / (to_string(s) + ".json"); }

std::vector<Stage> upstream(Stage s) {
  switch (s) {
    case Stage::Gen: return {};
    case Stage::Poison: return {Stage::Gen};
    case Stage::Train: return {Stage::Gen, Stage::Poison};
    case Stage::Eval:
    case Stage::Sweep:
    case Stage::Invert: return {Stage::Train};
    case Stage::Report: return {Stage::Eval, Stage::Sweep, Stage::Invert};
  }
  return {};
}

std::string checkpoint_rel(const ModelSpec& m, int seed_index) {
  return "models/" + model_slug(m.name) + "_s" + std::to_string(seed_index) + ".tabp";
}

std::vector<std::string> stage_inputs(Stage s, const ExperimentConfig& cfg) {
  std::vector<std::string> in;
  const auto models = cfg.model_specs();
  switch (s) {
    case Stage::Gen: break;
    case Stage::Poison: in.push_back("dataset"); break;
    case Stage::Train:
      for (const auto& m : models) {
        const std::string d = m.clean() ? "dataset" : "poisoned/" + model_slug(m.name);
        if (std::find(in.begin(), in.end(), d) == in.end()) in.push_back(d);
      }
      break;
    case Stage::Eval:
    case Stage::Sweep:
    case Stage::Invert:
      for (const auto& m : models)
        for (int i = 0; i < cfg.eval.seeds; ++i) in.push_back(checkpoint_rel(m, i));
      break;
    case Stage::Report: in = {"eval.csv", "sweep.csv", "invert.json"}; break;
  }
  return in;
}

// Every input must have been produced by an up-to-date upstream stage and
// still carry the hash that stage recorded.
std::map<std::string, std::string> verify_inputs(Stage s, const ExperimentConfig& cfg, const fs::path& out) {
  std::map<std::string, std::string> recorded;
  for (Stage up : upstream(s)) {
    const fs::path mp = manifest_path(out, up);
    if (!fs::exists(mp))
      throw ArtifactError("missing upstream artifact: stage '" + to_string(up) + "' has not run in " + out.string());
    const json m = read_json(mp);
    if (m.value("config_hash", "") != config_hash(cfg, stage_sections(up)))
      throw ArtifactError("stale upstream stage '" + to_string(up) + "': its config changed; rerun it");
    for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it) recorded[it.key()] = it.value();
  }
  std::map<std::string, std::string> hashes;
  for (const auto& rel : stage_inputs(s, cfg)) {
    const auto r = recorded.find(rel);
    if (r == recorded.end() || !fs::exists(out / rel))
      throw ArtifactError("missing upstream artifact " + (out / rel).string());
    const std::string h = hash_path(out / rel);
    if (h != r->second)
      throw ArtifactError("hash mismatch for " + (out / rel).string() + " (expected " + r->second + ", found " + h +
                          "); the file is stale or corrupted");
    hashes[rel] = h;
  }
  return hashes;
}

bool up_to_date(Stage s, const fs::path& out, const std::string& hash, const std::map<std::string, std::string>& inputs) {
  const fs::path mp = manifest_path(out, s);
  if (!fs::exists(mp)) return false;
  json m;
  try {
    m = read_json(mp);
  } catch (const ArtifactError&) {
    return false;
  }
  if (m.value("config_hash", "") != hash) return false;
  if (m["inputs"] != json(inputs)) return false;
  for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it) {
    if (!fs::exists(out / it.key())) return false;
    if (hash_path(out / it.key()) != it.value().get<std::string>()) return false;
  }
  return true;
}

TriggerSpec matched_trigger(const ModelSpec& m, const ExperimentConfig& cfg) {
  PoisonConfig pc = cfg.poison;
  pc.modality = m.modality.value_or(Modality::Joint);
  return pc.trigger_spec();
}

EvalOptions eval_options(const Context& ctx) {
  EvalOptions o;
  o.jobs = ctx.opts.jobs;
  o.rollout.sim = ctx.cfg.sim;
  o.rollout.height = ctx.cfg.dataset.height;
  o.rollout.width = ctx.cfg.dataset.width;
  return o;
}

std::vector<TrainedPolicy> load_models(const Context& ctx, const ModelSpec& m) {
  std::vector<TrainedPolicy> v;
  for (int i = 0; i < ctx.cfg.eval.seeds; ++i) v.push_back(load_checkpoint(ctx.out / checkpoint_rel(m, i)));
  return v;
}

std::string csv_header_hashed() { return csv_header() + ",config_hash"; }

// ---- stages -----------------------------------------------------------------------------

std::vector<std::string> stage_gen(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  Dataset ds;
  ds.header.height = cfg.dataset.height;
  ds.header.width = cfg.dataset.width;
  ds.header.dt = cfg.sim.dt;
  ds.header.vocab = base_vocabulary();
  ds.header.notes = "config " + ctx.hash;
  const int n = cfg.dataset.episodes;
  const int tasks = static_cast<int>(task_suite().size());
  std::size_t attempts = 0, failures = 0;
  for (std::size_t i = 0; ds.episodes.size() < static_cast<std::size_t>(n); ++i) {
    ++attempts;
    try {
      const std::uint64_t seed = derive_seed(cfg.dataset_seed(), "episode", i);
      ds.episodes.push_back(std::make_shared<Episode>(record_demonstration(
          seed, static_cast<int>(ds.episodes.size() % tasks), ds.header.vocab, ds.header.height, ds.header.width,
          cfg.sim)));
    } catch (const std::runtime_error&) {
      ++failures;
    }
    if (attempts >= 20 && static_cast<double>(failures) > cfg.dataset.max_failure_rate * static_cast<double>(attempts))
      break;
  }
  const double rate = static_cast<double>(failures) / static_cast<double>(attempts);
  if (rate > cfg.dataset.max_failure_rate) {
    std::ostringstream os;
    os << "scripted expert failed " << failures << " of " << attempts << " demonstrations (" << std::fixed
       << std::setprecision(1) << 100.0 * rate << "% > " << 100.0 * cfg.dataset.max_failure_rate << "%)";
    throw std::runtime_error(os.str());
  }
  fs::remove_all(ctx.out / "dataset");
  save_dataset(ds, ctx.out / "dataset");
  ctx.log("gen: " + std::to_string(ds.size()) + " episodes, " + std::to_string(failures) + " expert failures");
  return {"dataset"};
}

std::vector<std::string> stage_poison(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const Dataset clean = load_dataset(ctx.out / "dataset");
  std::vector<std::string> outs;
  fs::remove_all(ctx.out / "poisoned");
  for (const auto& m : cfg.model_specs()) {
    if (m.clean()) continue;
    PoisonConfig pc = cfg.poison;
    pc.modality = *m.modality;
    pc.p_ep = m.p_ep;
    pc.seed = cfg.poison_seed();
    auto r = poison_dataset(clean, pc, cfg.sim);
    r.dataset.header.notes = "config " + ctx.hash;
    const std::string rel = "poisoned/" + model_slug(m.name);
    save_dataset(r.dataset, ctx.out / rel);
    json audit = poison_audit_json(r, pc);
    audit["config_hash"] = ctx.hash;
    write_text(ctx.out / (rel + ".audit.json"), audit.dump(1) + "\n");
    outs.push_back(rel);
    outs.push_back(rel + ".audit.json");
    std::ostringstream os;
    os << "poison: " << m.name << " " << r.rates.poisoned_episodes << " episodes, p_step " << std::setprecision(4)
       << r.rates.p_step;
    ctx.log(os.str());
  }
  return outs;
}

std::vector<std::string> stage_train(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  std::vector<std::string> outs;
  fs::create_directories(ctx.out / "models");
  for (const auto& m : cfg.model_specs()) {
    const Dataset ds = load_dataset(ctx.out / (m.clean() ? std::string("dataset") : "poisoned/" + model_slug(m.name)));
    for (int i = 0; i < cfg.eval.seeds; ++i) {
      TrainConfig tc = cfg.train;
      tc.seed = cfg.train_seed(i);
      const auto t0 = std::chrono::steady_clock::now();
      TrainedPolicy p = train(ds, tc);
      p.notes = "config " + ctx.hash;
      const std::string rel = checkpoint_rel(m, i);
      save_checkpoint(p, ctx.out / rel);
      outs.push_back(rel);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream os;
      os << "train: " << rel << " final loss " << std::setprecision(5) << p.epoch_loss.back() << " (" << std::fixed
         << std::setprecision(0) << secs << " s)";
      ctx.log(os.str());
    }
  }
  return outs;
}

std::vector<std::string> stage_eval(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto opts = eval_options(ctx);
  std::string csv = csv_header_hashed() + "\n";
  json summary = {{"config_hash", ctx.hash}, {"models", json::array()}};
  for (const auto& m : cfg.model_specs()) {
    const auto trig = matched_trigger(m, cfg);
    std::vector<EvalReport> per_seed;
    for (const auto& p : load_models(ctx, m)) {
      EvalReport r = eval_attack(p, trig, cfg.eval.n, cfg.eval_seed(), opts);
      r.st = eval_clean(p, cfg.eval.n, cfg.eval_seed(), opts);
      per_seed.push_back(r);
    }
    const EvalReport agg = aggregate_seeds(per_seed);
    csv += csv_row(m.name, "matched", trig, agg) + "," + ctx.hash + "\n";
    json entry = {{"model", m.name},
                  {"p_ep", m.clean() ? 0.0 : m.p_ep},
                  {"modality", m.clean() ? json(nullptr) : json(to_string(*m.modality))},
                  {"aggregate", to_json(agg)},
                  {"per_seed", json::array()}};
    for (const auto& r : per_seed) entry["per_seed"].push_back(to_json(r));
    summary["models"].push_back(entry);
    std::ostringstream os;
    os << "eval: " << m.name << " ASR " << std::fixed << std::setprecision(1) << agg.asr << " ST " << agg.st;
    ctx.log(os.str());
  }
  write_text(ctx.out / "eval.csv", csv);
  write_text(ctx.out / "eval.json", summary.dump(1) + "\n");
  return {"eval.csv", "eval.json"};
}

std::vector<std::string> stage_sweep(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto opts = eval_options(ctx);
  std::string csv = csv_header_hashed() + "\n";
  json summary = {{"config_hash", ctx.hash}, {"cells", json::array()}};
  for (const auto& m : cfg.model_specs()) {
    const auto models = load_models(ctx, m);
    std::vector<std::vector<EvalReport>> by_row(cfg.sweep.size());
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto cells = mismatch_sweep({{m.name, &models[i]}}, cfg.sweep, cfg.eval.n, cfg.eval_seed(), opts);
      for (std::size_t r = 0; r < cells.size(); ++r) by_row[r].push_back(cells[r].report);
    }
    for (std::size_t r = 0; r < cfg.sweep.size(); ++r) {
      const EvalReport agg = aggregate_seeds(by_row[r]);
      csv += csv_row(m.name, cfg.sweep[r].label, cfg.sweep[r].spec, agg) + "," + ctx.hash + "\n";
      summary["cells"].push_back({{"model", m.name}, {"row", cfg.sweep[r].label}, {"report", to_json(agg)}});
    }
    ctx.log("sweep: " + m.name + " done");
  }
  write_text(ctx.out / "sweep.csv", csv);
  write_text(ctx.out / "sweep.json", summary.dump(1) + "\n");
  return {"sweep.csv", "sweep.json"};
}

std::vector<std::string> stage_invert(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto specs = cfg.model_specs();
  const auto clean_it = std::find_if(specs.begin(), specs.end(), [](const ModelSpec& m) { return m.clean(); });
  if (clean_it == specs.end()) throw ConfigError("invert needs a 'clean' model as the reference");
  const auto cleans = load_models(ctx, *clean_it);
  const int seeds = cfg.eval.seeds;
  const TrainedPolicy& reference = cleans[0];
  // Second clean seed as the divergence baseline; a third as the clean suspect.
  const TrainedPolicy& control_policy = cleans[std::min(1, seeds - 1)];
  const int clean_suspect = std::min(2, seeds - 1);

  const auto probes = collect_probes(cfg.invert.probes, cfg.invert_seed(), cfg.dataset.height, cfg.dataset.width,
                                     cfg.sim);
  const InversionConfig& ic = cfg.invert.inversion;
  const InversionResult self = invert(reference, reference, probes, ic);
  const InversionResult control = invert(control_policy, reference, probes, ic);

  std::vector<std::string> outs{"invert.json"};
  json j = {{"config_hash", ctx.hash},
            {"reference", checkpoint_rel(*clean_it, 0)},
            {"control", checkpoint_rel(*clean_it, std::min(1, seeds - 1))},
            {"self_control_d_best", self.d_best},
            {"control_d_best", control.d_best},
            {"models", json::array()}};
  std::vector<double> ratios;
  std::vector<bool> truth;
  for (const auto& m : specs) {
    const int idx = m.clean() ? clean_suspect : 0;
    const std::string rel = checkpoint_rel(m, idx);
    const TrainedPolicy suspect = load_checkpoint(ctx.out / rel);
    const InversionResult r = invert(suspect, reference, probes, ic);
    const double ratio = detection_ratio(r, control);
    ratios.push_back(ratio);
    truth.push_back(!m.clean());
    const std::string ppm = "invert_" + model_slug(m.name) + ".ppm";
    write_delta_heatmap(r.delta, cfg.dataset.height, cfg.dataset.width, ctx.out / ppm);
    outs.push_back(ppm);
    json e = inversion_report_json(r, ic);
    e["model"] = m.name;
    e["suspect"] = rel;
    e["ratio_vs_control"] = ratio;
    e["ratio_vs_self_control"] = detection_ratio(r, self);
    e["heatmap"] = ppm;
    j["models"].push_back(e);
    std::ostringstream os;
    os << "invert: " << m.name << " d_best " << std::scientific << std::setprecision(3) << r.d_best << " ratio "
       << std::fixed << std::setprecision(2) << ratio;
    ctx.log(os.str());
  }
  json roc = json::array();
  for (const auto& p : roc_table(ratios, truth, cfg.invert.thresholds))
    roc.push_back({{"threshold", p.threshold}, {"tpr", p.tpr}, {"fpr", p.fpr}, {"verdicts", p.verdicts}});
  j["roc"] = roc;
  write_text(ctx.out / "invert.json", j.dump(1) + "\n");
  return outs;
}

std::vector<std::string> stage_report(const Context& ctx) {
  write_text(ctx.out / "report.txt", render_report(ctx.out));
  return {"report.txt"};
}

}  // namespace

StageResult run_stage(Stage stage, const ExperimentConfig& cfg, const fs::path& out, const StageOptions& opts) {
  cfg.validate();
  StageResult res;
  res.stage = stage;
  res.config_hash = config_hash(cfg, stage_sections(stage));
  const auto inputs = verify_inputs(stage, cfg, out);
  Context ctx{cfg, out, opts, res.config_hash};
  if (!opts.force && up_to_date(stage, out, res.config_hash, inputs)) {
    res.skipped = true;
    ctx.log(to_string(stage) + ": up to date");
    return res;
  }
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> outputs;
  switch (stage) {
    case Stage::Gen: outputs = stage_gen(ctx); break;
    case Stage::Poison: outputs = stage_poison(ctx); break;
    case Stage::Train: outputs = stage_train(ctx); break;
    case Stage::Eval: outputs = stage_eval(ctx); break;
    case Stage::Sweep: outputs = stage_sweep(ctx); break;
    case Stage::Invert: outputs = stage_invert(ctx); break;
    case Stage::Report: outputs = stage_report(ctx); break;
  }
  json m;
  m["stage"] = to_string(stage);
  m["config_hash"] = res.config_hash;
  m["seed"] = cfg.seed;
  m["inputs"] = inputs;
  m["outputs"] = json::object();
  for (const auto& o : outputs) m["outputs"][o] = hash_path(out / o);
  m["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(manifest_path(out, stage), m.dump(1) + "\n");
  return res;
}

std::vector<StageResult> run_pipeline(const ExperimentConfig& cfg, const fs::path& out, const StageOptions& opts) {
  std::vector<StageResult> v;
  for (Stage s : all_stages()) v.push_back(run_stage(s, cfg, out, opts));
  return v;
}

// ---- report ------------------------------------------------------------------------------

namespace {

class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  std::string render() const {
    std::vector<std::size_t> w(rows_[0].size(), 0);
    for (const auto& r : rows_)
      for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        const std::string cell = i < r.size() ? r[i] : "";
        if (i == 0) os << std::left << std::setw(static_cast<int>(w[i])) << cell;
        else os << "  " << std::right << std::setw(static_cast<int>(w[i])) << cell;
      }
      os << "\n";
    };
    line(rows_[0]);
    std::size_t total = 0;
    for (auto x : w) total += x;
    os << std::string(total + 2 * (w.size() - 1), '-') << "\n";
    for (std::size_t i = 1; i < rows_.size(); ++i) line(rows_[i]);
    return os.str();
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

std::string pm(const std::string& mean, const std::string& sd) {
  if (mean.empty()) return "-";
  return sd.empty() ? mean : mean + " +- " + sd;
}

std::map<std::string, std::size_t> columns(const std::vector<std::string>& header) {
  std::map<std::string, std::size_t> c;
  for (std::size_t i = 0; i < header.size(); ++i) c[header[i]] = i;
  return c;
}

std::string fixed(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::string render_report(const fs::path& out) {
  std::ostringstream os;
  const auto eval = read_csv(out / "eval.csv");
  const auto sweep = read_csv(out / "sweep.csv");
  if (eval.empty() || sweep.empty()) throw ArtifactError("empty eval.csv or sweep.csv");

  auto cell = [](const std::vector<std::string>& r, const std::map<std::string, std::size_t>& c,
                 const std::string& k) -> std::string {
    const auto it = c.find(k);
    if (it == c.end()) throw ArtifactError("CSV is missing column " + k);
    return it->second < r.size() ? r[it->second] : "";
  };

  {
    const auto c = columns(eval[0]);
    Table t({"model", "ASR %", "ST %", "FFD cm", "RL ms", "seeds", "n"});
    for (std::size_t i = 1; i < eval.size(); ++i) {
      const auto& r = eval[i];
      t.add({cell(r, c, "model"), pm(cell(r, c, "asr"), cell(r, c, "asr_sd")), pm(cell(r, c, "st"), cell(r, c, "st_sd")),
             pm(cell(r, c, "ffd_cm"), cell(r, c, "ffd_cm_sd")), pm(cell(r, c, "rl_ms"), cell(r, c, "rl_ms_sd")),
             cell(r, c, "seeds"), cell(r, c, "n")});
    }
    os << "Matched-trigger attack results\n" << t.render() << "\n";
  }

  {
    const auto c = columns(sweep[0]);
    std::vector<std::string> order;
    for (std::size_t i = 1; i < sweep.size(); ++i) {
      const auto m = cell(sweep[i], c, "model");
      if (std::find(order.begin(), order.end(), m) == order.end()) order.push_back(m);
    }
    for (const auto& model : order) {
      Table t({"variant", "text", "shape", "pos", "scale", "opacity", "occl", "ASR %", "FFD cm", "RL ms", "no-onset"});
      for (std::size_t i = 1; i < sweep.size(); ++i) {
        const auto& r = sweep[i];
        if (cell(r, c, "model") != model) continue;
        const auto x = cell(r, c, "x"), y = cell(r, c, "y");
        auto text = cell(r, c, "text");
        if (text.size() > 16) text = text.substr(0, 13) + "...";
        t.add({cell(r, c, "row"), text.empty() ? "\\" : text, cell(r, c, "shape").empty() ? "\\" : cell(r, c, "shape"),
               x.empty() ? "\\" : "(" + x + "," + y + ")", cell(r, c, "scale").empty() ? "\\" : cell(r, c, "scale"),
               cell(r, c, "opacity").empty() ? "\\" : cell(r, c, "opacity"),
               cell(r, c, "occlusion").empty() ? "0" : cell(r, c, "occlusion"),
               pm(cell(r, c, "asr"), cell(r, c, "asr_sd")), pm(cell(r, c, "ffd_cm"), cell(r, c, "ffd_cm_sd")),
               pm(cell(r, c, "rl_ms"), cell(r, c, "rl_ms_sd")), cell(r, c, "no_onset")});
      }
      os << "Inference-time variants, model " << model << "\n" << t.render() << "\n";
    }
  }

  if (fs::exists(out / "invert.json")) {
    const json j = read_json(out / "invert.json");
    Table t({"model", "d_best", "ratio vs control", "best iter"});
    for (const auto& m : j["models"]) {
      std::ostringstream d;
      d << std::scientific << std::setprecision(3) << m["d_best"].get<double>();
      t.add({m["model"].get<std::string>(), d.str(), fixed(m["ratio_vs_control"].get<double>(), 2),
             std::to_string(m["best_iteration"].get<int>())});
    }
    std::ostringstream ctl;
    ctl << std::scientific << std::setprecision(3) << j["control_d_best"].get<double>() << ", self-control "
        << j["self_control_d_best"].get<double>();
    os << "Trigger inversion (control d_best " << ctl.str() << ")\n" << t.render() << "\n";
    Table roc({"threshold", "TPR", "FPR"});
    for (const auto& p : j["roc"])
      roc.add({fixed(p["threshold"].get<double>(), 2), fixed(p["tpr"].get<double>(), 2), fixed(p["fpr"].get<double>(), 2)});
    os << "Detection ROC\n" << roc.render();
  }
  return os.str();
}

}  // namespace tabvla
