#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "abisim/bisim.hpp"
#include "abisim/gridworld.hpp"
#include "abisim/rl.hpp"
#include "abisim/single_step.hpp"

namespace abisim {

struct DataConfig {
  std::size_t n_transitions = 100000;
  int shards = 1;
};

struct AnalysisConfig {
  int n_layouts = 20;
  int near_radius = 3;
  int far_radius = 6;
  int nearest_k = 16;
  std::size_t nearest_candidates = 1000000;
  std::vector<double> c_values{0.25, 0.75, 0.85, 0.99};
};

struct ExperimentConfig {
  GridConfig env;
  DataConfig data;
  SSTrainConfig ss;
  /// Horizon of the k-step (ACRO-style) baseline encoder.
  int acro_k = 5;
  BisimConfig bisim;
  RLConfig rl;
  AnalysisConfig analysis;
  std::vector<std::uint64_t> seeds{0};
  bool deterministic = true;

  void validate() const;
};

/// Parses and validates a config document; unknown keys and type mismatches raise ConfigError
/// naming the key path. Missing keys take defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Empty (or whitespace-only) files yield the defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

enum class Stage { collect, pretrain_ss, pretrain_acro, pretrain_bisim, train_rl, analyze, oracle };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct RunOptions {
  std::filesystem::path out = "runs";
  std::uint64_t seed = 0;
  bool force = false;
  /// analyze only
  std::string mode = "perturbation";
  std::filesystem::path checkpoint;
  std::filesystem::path analysis_out;
};

/// Output directory of a stage below the run root.
std::filesystem::path stage_dir(const RunOptions& opts, Stage stage, const ExperimentConfig& cfg);

/// Runs one stage and writes its manifest (config hash, seed, input/output hashes, wall time,
/// metric files). Returns the manifest.
nlohmann::json run_stage(Stage stage, const ExperimentConfig& cfg, const RunOptions& opts);

/// collect -> pretrain-ss -> [pretrain-acro] -> pretrain-bisim -> train-rl -> analyze.
nlohmann::json run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts);

/// Oracle certification battery: contraction, fixed-point uniqueness and factored invariance.
nlohmann::json oracle_certification(std::uint64_t seed);

}  // namespace abisim
