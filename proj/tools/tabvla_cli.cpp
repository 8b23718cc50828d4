// tabvla: gen | poison | train | eval | sweep | invert | report | all
//
// Exit codes: 0 success, 2 config error, 3 missing or stale upstream
// artifact, 4 numerical abort, 1 anything else.

#include <CLI11.hpp>

#include <iostream>

#include "tabvla/pipeline.hpp"

namespace {

struct Args {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  int jobs = 1;
  std::string out = "out";
  bool force = false;
};

}  // namespace

int main(int argc, char** argv) {
  using namespace tabvla;
  CLI::App app{"Targeted-backdoor testbed for a small vision-language-action policy"};
  app.require_subcommand(1, 1);
  Args args;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "JSON config file (defaults apply to missing keys)");
    sub->add_option("--set", args.sets, "Override one key, e.g. --set poison.p_ep=0.0125 (repeatable)");
    sub->add_option("--jobs", args.jobs, "Worker threads for rollouts")->check(CLI::PositiveNumber);
    sub->add_option("--out", args.out, "Output directory");
    sub->add_flag("--force", args.force, "Rerun even when outputs are up to date");
  };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen", "Record scripted-expert demonstrations"},
      {"poison", "Build the poisoned dataset of every backdoored model"},
      {"train", "Train every model for every seed"},
      {"eval", "Matched-trigger ASR and clean ST per model"},
      {"sweep", "Inference-time trigger mismatch grid"},
      {"invert", "Trigger-inversion detector against the clean reference"},
      {"report", "Render the CSV and JSON outputs as text tables"},
      {"all", "Run every stage in order"}};
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    std::optional<std::filesystem::path> path;
    if (args.config) path = *args.config;
    const ExperimentConfig cfg = load_config(path, args.sets);
    StageOptions opts;
    opts.jobs = args.jobs;
    opts.force = args.force;
    opts.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
    if (cmd == "all") {
      run_pipeline(cfg, args.out, opts);
    } else {
      run_stage(stage_from_string(cmd), cfg, args.out, opts);
    }
    if (cmd == "report" || cmd == "all") std::cout << render_report(args.out);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
