#include "abisim/experiment.hpp"

#include <chrono>
#include <sstream>

#include "abisim/analysis.hpp"
#include "abisim/io.hpp"
#include "abisim/json_util.hpp"
#include "abisim/tabular_oracle.hpp"

namespace abisim {

namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
  env.validate();
  if (data.n_transitions < 1) throw ConfigError("data.n_transitions must be >= 1");
  if (data.shards < 1) throw ConfigError("data.shards must be >= 1");
  ss.validate();
  if (acro_k < 1 || acro_k >= env.episode_len) {
    throw ConfigError("acro_k must lie in [1, env.episode_len)");
  }
  bisim.validate();
  rl.validate();
  if (analysis.n_layouts < 1) throw ConfigError("analysis.n_layouts must be >= 1");
  if (analysis.near_radius < 1 || analysis.far_radius <= analysis.near_radius) {
    throw ConfigError("analysis radii must satisfy 1 <= near_radius < far_radius");
  }
  if (analysis.nearest_k < 1) throw ConfigError("analysis.nearest_k must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  using namespace json_util;
  reject_unknown(j, {"env", "data", "ss", "acro_k", "bisim", "rl", "analysis", "seeds", "deterministic"}, "");
  ExperimentConfig cfg;
  if (j.contains("env")) {
    try {
      j.at("env").get_to(cfg.env);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("type mismatch under 'env': ") + e.what());
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"n_transitions", "shards"}, "data");
    read(d, "n_transitions", cfg.data.n_transitions, "data");
    read(d, "shards", cfg.data.shards, "data");
  }
  if (j.contains("ss")) cfg.ss = ss_config_from_json(j.at("ss"), "ss");
  read(j, "acro_k", cfg.acro_k, "");
  if (j.contains("bisim")) cfg.bisim = bisim_config_from_json(j.at("bisim"), "bisim");
  if (j.contains("rl")) cfg.rl = rl_config_from_json(j.at("rl"), "rl");
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    reject_unknown(a, {"n_layouts", "near_radius", "far_radius", "nearest_k", "nearest_candidates", "c_values"},
                   "analysis");
    read(a, "n_layouts", cfg.analysis.n_layouts, "analysis");
    read(a, "near_radius", cfg.analysis.near_radius, "analysis");
    read(a, "far_radius", cfg.analysis.far_radius, "analysis");
    read(a, "nearest_k", cfg.analysis.nearest_k, "analysis");
    read(a, "nearest_candidates", cfg.analysis.nearest_candidates, "analysis");
    read(a, "c_values", cfg.analysis.c_values, "analysis");
  }
  read(j, "seeds", cfg.seeds, "");
  read(j, "deterministic", cfg.deterministic, "");
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json env;
  to_json(env, cfg.env);
  return {{"env", env},
          {"data", {{"n_transitions", cfg.data.n_transitions}, {"shards", cfg.data.shards}}},
          {"ss", to_json(cfg.ss)},
          {"acro_k", cfg.acro_k},
          {"bisim", to_json(cfg.bisim)},
          {"rl", to_json(cfg.rl)},
          {"analysis",
           {{"n_layouts", cfg.analysis.n_layouts},
            {"near_radius", cfg.analysis.near_radius},
            {"far_radius", cfg.analysis.far_radius},
            {"nearest_k", cfg.analysis.nearest_k},
            {"nearest_candidates", cfg.analysis.nearest_candidates},
            {"c_values", cfg.analysis.c_values}}},
          {"seeds", cfg.seeds},
          {"deterministic", cfg.deterministic}};
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return ExperimentConfig{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string dump_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(dump_config(cfg)); }

std::string to_string(Stage s) {
  switch (s) {
    case Stage::collect: return "collect";
    case Stage::pretrain_ss: return "pretrain-ss";
    case Stage::pretrain_acro: return "pretrain-acro";
    case Stage::pretrain_bisim: return "pretrain-bisim";
    case Stage::train_rl: return "train-rl";
    case Stage::analyze: return "analyze";
    case Stage::oracle: return "oracle";
  }
  return "collect";
}

Stage stage_from_string(const std::string& s) {
  for (auto st : {Stage::collect, Stage::pretrain_ss, Stage::pretrain_acro, Stage::pretrain_bisim,
                  Stage::train_rl, Stage::analyze, Stage::oracle}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

fs::path stage_dir(const RunOptions& opts, Stage stage, const ExperimentConfig& cfg) {
  switch (stage) {
    case Stage::collect: return opts.out / "data";
    case Stage::pretrain_ss: return opts.out / "ss";
    case Stage::pretrain_acro: return opts.out / "acro";
    case Stage::pretrain_bisim: return opts.out / "bisim";
    case Stage::train_rl: return opts.out / "rl" / to_string(cfg.rl.encoder_init);
    case Stage::analyze:
      return opts.analysis_out.empty() ? opts.out / "analysis" / opts.mode : opts.analysis_out;
    case Stage::oracle: return opts.out / "oracle";
  }
  return opts.out;
}

namespace {

constexpr const char* kManifestName = "run_manifest.json";
constexpr const char* kVersion = "abisim 0.1.0";

void require_artifact(const fs::path& marker, Stage producer) {
  if (!fs::exists(marker)) {
    throw DependencyError("missing " + marker.string() + "; run '" + to_string(producer) + "' first");
  }
}

void claim_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir / kManifestName) && !force) {
    throw Error("refusing to overwrite existing outputs in " + dir.string() + " (pass --force)");
  }
  if (force && fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
}

nlohmann::json hashes(const std::vector<fs::path>& paths) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& p : paths) out[p.string()] = hash_path(p);
  return out;
}

/// Hashes every file of `dir` except the manifest itself.
nlohmann::json output_hashes(const fs::path& dir) {
  nlohmann::json out = nlohmann::json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = hash_path(f);
  return out;
}

std::vector<std::string> metric_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), dir).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json finish(Stage stage, const ExperimentConfig& cfg, const RunOptions& opts,
                      const fs::path& dir, const std::vector<fs::path>& inputs,
                      std::chrono::steady_clock::time_point start, nlohmann::json extra = {}) {
  nlohmann::json m = {
      {"stage", to_string(stage)},
      {"version", kVersion},
      {"config_hash", config_hash(cfg)},
      {"config", to_json(cfg)},
      {"seed", opts.seed},
      {"deterministic", cfg.deterministic},
      {"inputs", hashes(inputs)},
      {"outputs", output_hashes(dir)},
      {"metrics", metric_files(dir)},
      {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
  if (!extra.is_null()) m["results"] = extra;
  write_json(dir / kManifestName, m);
  return m;
}

void save_pair_image(const fs::path& path, const Observation& a, const Observation& b) {
  const int H = a.height, W = a.width;
  Eigen::MatrixXd img = Eigen::MatrixXd::Constant(H, 2 * W + 1, std::numeric_limits<double>::quiet_NaN());
  for (int side = 0; side < 2; ++side) {
    const Observation& o = side ? b : a;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double v = 0.0;
        if (o.raw(Observation::kObstacles, y, x) > 0) v = 0.4;
        if (o.raw(Observation::kGoal, y, x) > 0) v = 0.7;
        if (o.raw(Observation::kAgent, y, x) > 0) v = 1.0;
        img(y, x + side * (W + 1)) = v;
      }
    }
  }
  write_heatmap_png(path, img);
}

nlohmann::json run_analysis(const ExperimentConfig& cfg, const RunOptions& opts, const fs::path& dir,
                            std::vector<fs::path>& inputs) {
  const fs::path ckpt = opts.checkpoint.empty() ? opts.out / "bisim" : opts.checkpoint;
  const GridWorld world(cfg.env);
  nlohmann::json results;
  auto encoder_needed = [&] {
    require_artifact(ckpt / "params.json", Stage::pretrain_bisim);
    inputs.push_back(ckpt);
    return load_encoder(ckpt);
  };
  const auto& a = cfg.analysis;
  if (opts.mode == "perturbation") {
    const auto encoder = encoder_needed();
    const auto layouts = analysis::sample_layouts(cfg.env, a.n_layouts, opts.seed);
    CsvWriter summary({"layout", "agent_x", "agent_y", "fraction_d1", "fraction_d2_3", "response_radius"});
    double radius = 0.0;
    for (std::size_t i = 0; i < layouts.size(); ++i) {
      const auto map = analysis::perturbation_map(encoder, world, layouts[i], ckpt.string());
      char stem[32];
      std::snprintf(stem, sizeof stem, "map_%03zu", i);
      analysis::write_map(map, dir, stem);
      const double r = analysis::response_radius(map);
      radius += r;
      summary.add_row({double(i), double(layouts[i].agent.x), double(layouts[i].agent.y),
                       analysis::band_fraction(map, 1, 1), analysis::band_fraction(map, 2, 3), r});
    }
    summary.save(dir / "summary.csv");
    results = {{"mode", "perturbation"}, {"toggle", "single cell"},
               {"mean_response_radius", radius / double(layouts.size())}};
  } else if (opts.mode == "nearfar") {
    const auto encoder = encoder_needed();
    const auto rep = analysis::near_far_sensitivity(encoder, cfg.env, a.n_layouts, a.near_radius,
                                                    a.far_radius, opts.seed);
    CsvWriter near({"distance"}), far({"distance"});
    for (double d : rep.near_distances) near.add_row({d});
    for (double d : rep.far_distances) far.add_row({d});
    near.save(dir / "near.csv");
    far.save(dir / "far.csv");
    Eigen::MatrixXd bars(1, 2);
    bars << rep.near_median, rep.far_median;
    write_heatmap_png(dir / "medians.png", bars, 32);
    results = {{"mode", "nearfar"}, {"perturbation", "2x2 block"},
               {"near_radius", rep.near_radius}, {"far_radius", rep.far_radius},
               {"near_median", rep.near_median}, {"far_median", rep.far_median},
               {"near_iqr", rep.near_iqr}, {"far_iqr", rep.far_iqr}};
  } else if (opts.mode == "pairs") {
    require_artifact(opts.out / "data" / "manifest.json", Stage::collect);
    const auto encoder = encoder_needed();
    inputs.push_back(opts.out / "data");
    const auto ds = load_dataset(opts.out / "data");
    const auto pairs = analysis::nearest_pairs(encoder, ds, std::size_t(a.nearest_k),
                                               a.nearest_candidates, opts.seed);
    CsvWriter csv({"rank", "i", "j", "distance"});
    for (std::size_t r = 0; r < pairs.size(); ++r) {
      csv.add_row({double(r), double(pairs[r].i), double(pairs[r].j), pairs[r].distance});
      char name[32];
      std::snprintf(name, sizeof name, "pair_%03zu.png", r);
      save_pair_image(dir / name, ds[pairs[r].i].obs, ds[pairs[r].j].obs);
    }
    csv.save(dir / "pairs.csv");
    results = {{"mode", "pairs"}, {"k", pairs.size()}};
  } else if (opts.mode == "csweep") {
    require_artifact(opts.out / "data" / "manifest.json", Stage::collect);
    require_artifact(opts.out / "ss" / "params.json", Stage::pretrain_ss);
    inputs.push_back(opts.out / "data");
    inputs.push_back(opts.out / "ss");
    const auto ds = load_dataset(opts.out / "data");
    auto psi = load_encoder(opts.out / "ss");
    const auto rows = analysis::c_sweep(ds, psi, a.c_values, cfg.bisim, opts.seed, a.n_layouts);
    CsvWriter csv({"c", "response_radius"});
    Eigen::MatrixXd bars(1, Eigen::Index(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      csv.add_row({rows[i].c, rows[i].response_radius});
      bars(0, Eigen::Index(i)) = rows[i].response_radius;
    }
    csv.save(dir / "csweep.csv");
    write_heatmap_png(dir / "csweep.png", bars, 32);
    results = {{"mode", "csweep"}, {"rows", rows.size()}};
  } else {
    throw ConfigError("unknown analysis mode '" + opts.mode + "'");
  }
  return results;
}

}  // namespace

nlohmann::json oracle_certification(std::uint64_t seed) {
  using namespace oracle;
  Rng rng = make_rng(seed, 81);
  nlohmann::json report;
  // Contraction over random MDPs and metric pairs.
  long trials = 0, failures = 0;
  double worst_slack = std::numeric_limits<double>::infinity();
  for (double c : {0.5, 0.9, 0.999}) {
    for (BaseWeight w : {BaseWeight::one, BaseWeight::one_minus_c}) {
      for (int t = 0; t < 100; ++t) {
        const int n = std::uniform_int_distribution<int>(2, 10)(rng);
        const int A = std::uniform_int_distribution<int>(1, 4)(rng);
        const FiniteMDP mdp = random_mdp(n, A, rng, t % 3 == 0 ? 1.0 : 0.5);
        const MetricTable d_ss = random_pseudometric(n, rng);
        const auto chk = check_contraction(mdp, d_ss, random_pseudometric(n, rng, 3.0),
                                           random_pseudometric(n, rng, 3.0), c, w);
        ++trials;
        failures += !chk.holds;
        worst_slack = std::min(worst_slack, chk.rhs - chk.lhs);
      }
    }
  }
  report["contraction"] = {{"trials", trials}, {"failures", failures}, {"min_slack", worst_slack}};

  double worst_gap = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const FiniteMDP mdp = random_mdp(n, std::uniform_int_distribution<int>(1, 4)(rng), rng);
    const MetricTable d_ss = random_pseudometric(n, rng);
    const double c = 0.9;
    const auto a = solve_fixed_point(mdp, d_ss, c, BaseWeight::one_minus_c, 1e-10);
    const double diameter = d_ss.maxCoeff() / (1.0 - c) + 1.0;
    const auto b = solve_fixed_point(mdp, d_ss, c, BaseWeight::one_minus_c, 1e-10,
                                     MetricTable(MetricTable::Constant(n, n, diameter) -
                                                 diameter * MetricTable::Identity(n, n)));
    worst_gap = std::max(worst_gap, sup_norm(a.d, b.d));
  }
  report["uniqueness"] = {{"mdps", 20}, {"max_sup_gap", worst_gap}, {"passed", worst_gap <= 1e-6}};

  nlohmann::json inv = nlohmann::json::array();
  bool all_ok = true;
  for (double c : {0.5, 0.9, 0.99}) {
    const auto rep = factored_invariance_check(4, 3, c);
    all_ok = all_ok && rep.invariant && rep.matches_marginal;
    inv.push_back({{"c", c},
                   {"max_uncontrollable_distance", rep.max_uncontrollable_distance},
                   {"max_controllable_error", rep.max_controllable_error},
                   {"iterations", rep.iterations},
                   {"invariant", rep.invariant},
                   {"matches_marginal", rep.matches_marginal}});
  }
  report["invariance"] = inv;
  report["passed"] = failures == 0 && worst_gap <= 1e-6 && all_ok;
  return report;
}

nlohmann::json run_stage(Stage stage, const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const fs::path dir = stage_dir(opts, stage, cfg);
  const fs::path data_dir = opts.out / "data";
  std::vector<fs::path> inputs;

  switch (stage) {
    case Stage::collect: {
      claim_output_dir(dir, opts.force);
      std::vector<TransitionDataset> shards;
      const std::size_t per = cfg.data.n_transitions / std::size_t(cfg.data.shards);
      for (int s = 0; s < cfg.data.shards; ++s) {
        const std::size_t n = s + 1 == cfg.data.shards ? cfg.data.n_transitions - per * std::size_t(s) : per;
        shards.push_back(collect_random(cfg.env, n, derive_seed(opts.seed, std::uint64_t(s))));
      }
      auto ds = cfg.data.shards == 1 ? std::move(shards.front()) : merge_shards(shards);
      ds.collection_seed = opts.seed;
      save_dataset(ds, dir);
      return finish(stage, cfg, opts, dir, inputs, start, {{"transitions", ds.size()}});
    }
    case Stage::pretrain_ss:
    case Stage::pretrain_acro: {
      require_artifact(data_dir / "manifest.json", Stage::collect);
      claim_output_dir(dir, opts.force);
      inputs.push_back(data_dir);
      const auto ds = load_dataset(data_dir);
      SSTrainConfig ss = cfg.ss;
      if (stage == Stage::pretrain_acro) ss.k = cfg.acro_k;
      auto result = train_single_step(ds, ss, opts.seed);
      save_single_step(dir, result.model, result.log, ss);
      result.eval_log.save(dir / "eval_log.csv");
      return finish(stage, cfg, opts, dir, inputs, start,
                    {{"final_eval_accuracy", result.final_eval_accuracy}});
    }
    case Stage::pretrain_bisim: {
      require_artifact(data_dir / "manifest.json", Stage::collect);
      require_artifact(opts.out / "ss" / "params.json", Stage::pretrain_ss);
      claim_output_dir(dir, opts.force);
      inputs = {data_dir, opts.out / "ss"};
      const auto ds = load_dataset(data_dir);
      auto psi = load_encoder(opts.out / "ss");
      auto result = train_action_bisim(ds, psi, cfg.bisim, opts.seed);
      save_bisim(dir, result.model, result.log, cfg.bisim);
      return finish(stage, cfg, opts, dir, inputs, start,
                    {{"iterations", result.iterations},
                     {"converged", result.converged},
                     {"psi_checksum", result.psi_checksum_after}});
    }
    case Stage::train_rl: {
      RLConfig rl = cfg.rl;
      switch (rl.encoder_init) {
        case EncoderInit::none: break;
        case EncoderInit::ssi:
          require_artifact(opts.out / "ss" / "params.json", Stage::pretrain_ss);
          rl.encoder_checkpoint = (opts.out / "ss").string();
          break;
        case EncoderInit::acro:
          require_artifact(opts.out / "acro" / "params.json", Stage::pretrain_acro);
          rl.encoder_checkpoint = (opts.out / "acro").string();
          break;
        case EncoderInit::abisim:
          require_artifact(opts.out / "bisim" / "params.json", Stage::pretrain_bisim);
          rl.encoder_checkpoint = (opts.out / "bisim").string();
          break;
        case EncoderInit::path:
          if (!fs::exists(fs::path(rl.encoder_checkpoint) / "params.json")) {
            throw DependencyError("rl.encoder_checkpoint '" + rl.encoder_checkpoint +
                                  "' does not hold a checkpoint");
          }
          break;
      }
      claim_output_dir(dir, opts.force);
      if (!rl.encoder_checkpoint.empty()) inputs.push_back(rl.encoder_checkpoint);
      auto result = dqn_train(cfg.env, rl, opts.seed);
      result.curve.save(dir / "curve.csv");
      nn::ParamArchive archive;
      archive.add(result.q.parameters());
      archive.meta = {{"kind", "dqn"}, {"encoder", nn::to_json(result.q.encoder.spec())}};
      archive.save(dir);
      return finish(stage, cfg, opts, dir, inputs, start,
                    {{"updates", result.updates},
                     {"initial_encoder_fingerprint", result.initial_encoder_fingerprint},
                     {"final_eval_return", result.curve.empty() ? 0.0 : result.curve.last("mean_eval_return")}});
    }
    case Stage::analyze: {
      claim_output_dir(dir, opts.force);
      auto results = run_analysis(cfg, opts, dir, inputs);
      return finish(stage, cfg, opts, dir, inputs, start, results);
    }
    case Stage::oracle: {
      claim_output_dir(dir, opts.force);
      const auto report = oracle_certification(opts.seed);
      write_json(dir / "report.json", report);
      return finish(stage, cfg, opts, dir, inputs, start, {{"passed", report.at("passed")}});
    }
  }
  return {};
}

nlohmann::json run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts) {
  nlohmann::json out = nlohmann::json::object();
  std::vector<Stage> stages{Stage::collect, Stage::pretrain_ss};
  if (cfg.rl.encoder_init == EncoderInit::acro) stages.push_back(Stage::pretrain_acro);
  stages.push_back(Stage::pretrain_bisim);
  stages.push_back(Stage::train_rl);
  for (Stage s : stages) out[to_string(s)] = run_stage(s, cfg, opts).at("outputs").size();
  for (const char* mode : {"perturbation", "nearfar"}) {
    RunOptions a = opts;
    a.mode = mode;
    out[std::string("analyze:") + mode] = run_stage(Stage::analyze, cfg, a).at("results");
  }
  return out;
}

}  // namespace abisim
