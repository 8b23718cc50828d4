#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/config.hpp"

namespace tabvla {

// Output directory layout:
//   dataset/                  clean demonstrations
//   poisoned/<model>/         poisoned dataset per backdoored model (+ .audit.json)
//   models/<model>_s<i>.tabp  checkpoints, one per training seed
//   eval.csv, eval.json       matched-trigger ASR / ST per model
//   sweep.csv, sweep.json     mismatch grid per model
//   invert.json, invert_<model>.ppm
//   report.txt
//   manifests/<stage>.json    config hash, input/output hashes, seed, duration

enum class Stage { Gen, Poison, Train, Eval, Sweep, Invert, Report };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
const std::vector<Stage>& all_stages();

struct StageOptions {
  int jobs = 1;
  bool force = false;  // rerun even when up to date
  std::function<void(const std::string&)> log;
};

struct StageResult {
  Stage stage = Stage::Gen;
  bool skipped = false;
  std::string config_hash;
};

/// Runs one stage. Throws ArtifactError when an upstream artifact is missing
/// or no longer matches the hash its producer recorded.
StageResult run_stage(Stage stage, const ExperimentConfig& cfg, const std::filesystem::path& out,
                      const StageOptions& opts = {});
/// Every stage in order.
std::vector<StageResult> run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                      const StageOptions& opts = {});

/// Config sections a stage depends on (its own and its upstream stages').
std::vector<std::string> stage_sections(Stage s);

/// Content hash of a file, or of every file below a directory (sorted by
/// relative path, names included).
std::string hash_path(const std::filesystem::path& p);

/// Plain-text tables rendered from eval.csv, sweep.csv and invert.json.
/// Throws ArtifactError when eval.csv or sweep.csv is missing.
std::string render_report(const std::filesystem::path& out);

/// Minimal CSV reader for the files written here (quoted fields allowed).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

/// Filesystem-safe model directory name: "vision@0.01" -> "vision_p0.01".
std::string model_slug(const std::string& name);

}  // namespace tabvla
