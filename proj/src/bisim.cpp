#include "abisim/bisim.hpp"

#include <algorithm>
#include <numeric>

#include "abisim/features.hpp"
#include "abisim/json_util.hpp"
#include "abisim/nn/optim.hpp"

namespace abisim {

std::string to_string(ActionExpectation e) {
  switch (e) {
    case ActionExpectation::enumerate: return "enumerate";
    case ActionExpectation::monte_carlo: return "monte_carlo";
    case ActionExpectation::behavioral: return "behavioral";
  }
  return "enumerate";
}

ActionExpectation action_expectation_from_string(const std::string& s) {
  if (s == "enumerate") return ActionExpectation::enumerate;
  if (s == "monte_carlo") return ActionExpectation::monte_carlo;
  if (s == "behavioral") return ActionExpectation::behavioral;
  throw ConfigError("unknown action expectation '" + s + "'");
}

void BisimConfig::validate() const {
  if (!(c >= 0.0 && c < 1.0)) throw ConfigError("bisim.c must lie in [0, 1)");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("bisim.tau must lie in [0, 1]");
  if (steps < 0) throw ConfigError("bisim.steps must be >= 0");
  if (batch < 1) throw ConfigError("bisim.batch must be >= 1");
  if (!(learning_rate > 0.0) || !(forward_learning_rate > 0.0)) {
    throw ConfigError("bisim learning rates must be > 0");
  }
  if (action_expectation == ActionExpectation::monte_carlo && mc_samples < 1) {
    throw ConfigError("bisim.mc_samples must be >= 1 for monte_carlo");
  }
  if (convergence_window < 1) throw ConfigError("bisim.convergence_window must be >= 1");
}

nlohmann::json to_json(const BisimConfig& cfg) {
  return {{"c", cfg.c},
          {"tau", cfg.tau},
          {"steps", cfg.steps},
          {"batch", cfg.batch},
          {"learning_rate", cfg.learning_rate},
          {"forward_learning_rate", cfg.forward_learning_rate},
          {"action_expectation", to_string(cfg.action_expectation)},
          {"mc_samples", cfg.mc_samples},
          {"forward_hidden", cfg.forward_hidden},
          {"phi_init", cfg.phi_init == PhiInit::psi ? "psi" : "random"},
          {"convergence_tol", cfg.convergence_tol},
          {"convergence_window", cfg.convergence_window}};
}

BisimConfig bisim_config_from_json(const nlohmann::json& j, const std::string& path) {
  using namespace json_util;
  reject_unknown(j, {"c", "tau", "steps", "batch", "learning_rate", "forward_learning_rate",
                     "action_expectation", "mc_samples", "forward_hidden", "phi_init",
                     "convergence_tol", "convergence_window"},
                 path);
  BisimConfig cfg;
  read(j, "c", cfg.c, path);
  read(j, "tau", cfg.tau, path);
  read(j, "steps", cfg.steps, path);
  read(j, "batch", cfg.batch, path);
  read(j, "learning_rate", cfg.learning_rate, path);
  read(j, "forward_learning_rate", cfg.forward_learning_rate, path);
  std::string expectation = to_string(cfg.action_expectation);
  read(j, "action_expectation", expectation, path);
  try {
    cfg.action_expectation = action_expectation_from_string(expectation);
  } catch (const ConfigError&) {
    throw ConfigError("invalid value at '" + join(path, "action_expectation") + "': " + expectation);
  }
  read(j, "mc_samples", cfg.mc_samples, path);
  read(j, "forward_hidden", cfg.forward_hidden, path);
  std::string init = "psi";
  read(j, "phi_init", init, path);
  if (init == "psi") cfg.phi_init = PhiInit::psi;
  else if (init == "random") cfg.phi_init = PhiInit::random;
  else throw ConfigError("invalid value at '" + join(path, "phi_init") + "': " + init);
  read(j, "convergence_tol", cfg.convergence_tol, path);
  read(j, "convergence_window", cfg.convergence_window, path);
  cfg.validate();
  return cfg;
}

nn::Matrix<float> embed_dataset(const nn::Encoder<float>& encoder, const TransitionDataset& ds,
                                bool next) {
  constexpr std::size_t kChunk = 512;
  nn::Matrix<float> out(encoder.embed_dim(), Eigen::Index(ds.size()));
  std::vector<const Observation*> obs;
  for (std::size_t begin = 0; begin < ds.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, ds.size() - begin);
    obs.clear();
    for (std::size_t i = begin; i < begin + n; ++i) obs.push_back(next ? &ds[i].next_obs : &ds[i].obs);
    out.middleCols(Eigen::Index(begin), Eigen::Index(n)) =
        encoder.infer(stack_observations<float>(std::span<const Observation* const>(obs)));
  }
  return out;
}

BisimResult train_action_bisim(const TransitionDataset& ds, nn::Encoder<float>& psi,
                               const BisimConfig& cfg, std::uint64_t seed, const BisimHook& hook) {
  cfg.validate();
  if (ds.size() < std::size_t(cfg.batch)) {
    throw InsufficientDataError("bisimulation training needs at least one full batch");
  }
  BisimResult result;
  const auto psi_params = psi.parameters("psi");
  result.psi_checksum_before = nn::fingerprint(psi_params);

  Rng init_rng = make_rng(seed, 21);
  auto& model = result.model;
  const nn::EncoderSpec spec = psi.spec();
  model.phi = nn::Encoder<float>(spec, init_rng);
  if (cfg.phi_init == PhiInit::psi) {
    nn::copy_params(model.phi.parameters("encoder"), psi.parameters("encoder"));
  }
  model.phi_target = model.phi;
  model.forward = ForwardModel<float>(spec.embed_dim, kNumActions, cfg.forward_hidden, init_rng);

  const auto phi_params = model.phi_parameters();
  const auto target_params = model.target_parameters();
  nn::Adam<float> phi_opt(phi_params, float(cfg.learning_rate));
  nn::Adam<float> fwd_opt(model.forward_parameters(), float(cfg.forward_learning_rate));

  const nn::Matrix<float> psi_table = embed_dataset(psi, ds);
  const TargetSpec target_spec = cfg.target_spec();

  Rng rng = make_rng(seed, 22);
  DivergenceGuard guard(10.0, 1000);
  const std::size_t batch = std::size_t(cfg.batch);
  std::vector<const Observation*> obs(batch), next_obs(batch);
  std::vector<int> actions(batch);
  std::vector<std::size_t> partner(batch);
  nn::Matrix<float> psi_i(spec.embed_dim, cfg.batch), psi_j(spec.embed_dim, cfg.batch),
      zbar_j(spec.embed_dim, cfg.batch), z_j(spec.embed_dim, cfg.batch);
  double window_sum = 0.0, prev_window_mean = -1.0;

  for (int it = 0; it < cfg.steps; ++it) {
    // One transition batch serves both updates; its states double as the pair batch.
    const auto idx = sample_indices(ds.size(), batch, rng);
    std::iota(partner.begin(), partner.end(), std::size_t(0));
    std::shuffle(partner.begin(), partner.end(), rng);
    for (std::size_t k = 0; k < batch; ++k) {
      obs[k] = &ds[idx[k]].obs;
      next_obs[k] = &ds[idx[k]].next_obs;
      actions[k] = ds[idx[k]].action;
    }
    const auto x = stack_observations<float>(std::span<const Observation* const>(obs));
    const auto xn = stack_observations<float>(std::span<const Observation* const>(next_obs));

    // (1) forward model on detached online embeddings.
    const nn::Matrix<float> z = model.phi.forward(x);
    const nn::Matrix<float> zn = model.phi.infer(xn);
    const double nll = forward_nll(model.forward, z, actions, zn, true);
    fwd_opt.step();

    // (2) multi-step encoder against bootstrapped targets.
    const nn::Matrix<float> zbar = model.phi_target.infer(x);
    std::vector<int> behavior(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      psi_i.col(Eigen::Index(k)) = psi_table.col(Eigen::Index(idx[k]));
      psi_j.col(Eigen::Index(k)) = psi_table.col(Eigen::Index(idx[partner[k]]));
      zbar_j.col(Eigen::Index(k)) = zbar.col(Eigen::Index(partner[k]));
      z_j.col(Eigen::Index(k)) = z.col(Eigen::Index(partner[k]));
      behavior[k] = actions[k];
    }
    const nn::Vector<float> targets =
        abisim_target(psi_i, psi_j, zbar, zbar_j, model.forward, target_spec, &rng, behavior);
    nn::Matrix<float> dz, dz_j;
    const double loss = bisim_loss(z, z_j, targets, &dz, &dz_j);
    for (std::size_t k = 0; k < batch; ++k) dz.col(Eigen::Index(partner[k])) += dz_j.col(Eigen::Index(k));
    model.phi.backward(dz);
    phi_opt.step();

    // (3) momentum update of the target encoder.
    nn::ema_update(target_params, phi_params, float(cfg.tau));

    if (!nn::all_finite(phi_params)) {
      throw NumericalError("non-finite encoder parameters at iteration " + std::to_string(it));
    }
    result.log.add({double(it), nll, loss, double(targets.mean()), cfg.tau, cfg.c});
    result.iterations = it + 1;
    if (hook) hook(result.iterations, model);
    if (guard.update(loss)) {
      throw NumericalError("bisimulation training diverged at iteration " + std::to_string(it));
    }
    window_sum += loss;
    if ((it + 1) % cfg.convergence_window == 0) {
      const double mean = window_sum / cfg.convergence_window;
      window_sum = 0.0;
      if (prev_window_mean > 0.0 &&
          std::abs(mean - prev_window_mean) / prev_window_mean < cfg.convergence_tol) {
        result.converged = true;
        break;
      }
      prev_window_mean = mean;
    }
  }
  result.psi_checksum_after = nn::fingerprint(psi.parameters("psi"));
  if (result.psi_checksum_after != result.psi_checksum_before) {
    throw NumericalError("single-step encoder changed during bisimulation training");
  }
  return result;
}

void save_bisim(const std::filesystem::path& dir, BisimModel& model, const MetricLog& log,
                const BisimConfig& cfg) {
  nn::ParamArchive archive;
  archive.add(model.phi_parameters());
  archive.add(model.target_parameters());
  archive.add(model.forward_parameters());
  archive.meta = {{"kind", "action_bisim"},
                  {"encoder", nn::to_json(model.phi.spec())},
                  {"forward_hidden", cfg.forward_hidden},
                  {"n_actions", model.forward.n_actions()},
                  {"config", to_json(cfg)}};
  archive.save(dir);
  log.save(dir / "train_log.csv");
}

BisimModel load_bisim(const std::filesystem::path& dir) {
  const auto archive = nn::ParamArchive::load(dir);
  if (archive.meta.value("kind", std::string()) != "action_bisim") {
    throw DependencyError(dir.string() + " is not an action-bisimulation checkpoint");
  }
  Rng rng(0);
  const auto spec = nn::encoder_spec_from_json(archive.meta.at("encoder"));
  BisimModel model;
  model.phi = nn::Encoder<float>(spec, rng);
  model.phi_target = nn::Encoder<float>(spec, rng);
  model.forward = ForwardModel<float>(spec.embed_dim, archive.meta.at("n_actions").get<int>(),
                                      archive.meta.at("forward_hidden").get<std::vector<int>>(), rng);
  archive.assign(model.phi_parameters(), "encoder", "encoder");
  archive.assign(model.target_parameters(), "target", "target");
  archive.assign(model.forward_parameters(), "forward", "forward");
  return model;
}

}  // namespace abisim
