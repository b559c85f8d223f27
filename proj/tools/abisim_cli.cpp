#include <iostream>

#include "CLI11.hpp"
#include "abisim/experiment.hpp"

namespace {

using namespace abisim;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Action-bisimulation representation learning on Nav2D grids"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out = "runs";
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool force = false;
  app.add_option("--config", config_path, "JSON config (defaults apply to missing keys)");
  app.add_option("--seed", seed, "Run seed");
  app.add_option("--out", out, "Run root directory");
  app.add_flag("--deterministic", deterministic, "Force deterministic mode");
  app.add_flag("--force", force, "Overwrite existing stage outputs");

  std::string init = "";
  std::string encoder_checkpoint;
  std::string checkpoint, mode = "perturbation", analysis_out;
  bool acro = false;

  auto* collect = app.add_subcommand("collect", "Collect uniform-random transitions");
  auto* ss = app.add_subcommand("pretrain-ss", "Train the single-step inverse-dynamics encoder");
  ss->add_flag("--acro", acro, "Train the k-step variant (horizon acro_k) into <out>/acro");
  auto* acro_cmd = app.add_subcommand("pretrain-acro", "Train the k-step inverse-dynamics encoder");
  auto* bisim = app.add_subcommand("pretrain-bisim", "Train the action-bisimulation encoder");
  auto* rl = app.add_subcommand("train-rl", "Train DQN with an optional pretrained encoder");
  rl->add_option("--init", init, "Encoder init: none, ssi, acro, abisim, path")
      ->check(CLI::IsMember({"none", "ssi", "acro", "abisim", "path"}));
  rl->add_option("--encoder-checkpoint", encoder_checkpoint, "Checkpoint directory for --init path");
  auto* oracle = app.add_subcommand("oracle", "Run the tabular oracle certification battery");
  auto* analyze = app.add_subcommand("analyze", "Embedding-space analyses");
  analyze->add_option("--checkpoint", checkpoint, "Encoder checkpoint (default <out>/bisim)");
  analyze->add_option("--mode", mode, "Analysis mode")
      ->check(CLI::IsMember({"perturbation", "nearfar", "pairs", "csweep"}));
  analyze->add_option("--out", analysis_out, "Output directory (default <out>/analysis/<mode>)");
  auto* pipeline = app.add_subcommand("pipeline", "collect -> pretrain-ss -> pretrain-bisim -> train-rl -> analyze");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (deterministic) cfg.deterministic = true;
    if (!init.empty()) cfg.rl.encoder_init = encoder_init_from_string(init);
    if (!encoder_checkpoint.empty()) cfg.rl.encoder_checkpoint = encoder_checkpoint;
    cfg.validate();

    RunOptions opts;
    opts.out = out;
    opts.seed = seed;
    opts.force = force;
    opts.mode = mode;
    opts.checkpoint = checkpoint;
    opts.analysis_out = analysis_out;

    nlohmann::json result;
    if (*collect) {
      result = run_stage(Stage::collect, cfg, opts);
    } else if (*ss) {
      result = run_stage(acro ? Stage::pretrain_acro : Stage::pretrain_ss, cfg, opts);
    } else if (*acro_cmd) {
      result = run_stage(Stage::pretrain_acro, cfg, opts);
    } else if (*bisim) {
      result = run_stage(Stage::pretrain_bisim, cfg, opts);
    } else if (*rl) {
      result = run_stage(Stage::train_rl, cfg, opts);
    } else if (*oracle) {
      result = run_stage(Stage::oracle, cfg, opts);
    } else if (*analyze) {
      result = run_stage(Stage::analyze, cfg, opts);
    } else if (*pipeline) {
      result = run_pipeline(cfg, opts);
    }
    if (result.contains("outputs")) result.erase("outputs");
    if (result.contains("config")) result.erase("config");
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
