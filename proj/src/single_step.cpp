#include "abisim/single_step.hpp"

#include <algorithm>
#include <numeric>

#include "abisim/json_util.hpp"
#include "abisim/nn/optim.hpp"

namespace abisim {

void SSTrainConfig::validate() const {
  if (!(beta_max >= 0.0)) throw ConfigError("ss.beta_max must be >= 0");
  if (k < 1) throw ConfigError("ss.k must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("ss.learning_rate must be > 0");
  if (batch < 1) throw ConfigError("ss.batch must be >= 1");
  if (steps < 0) throw ConfigError("ss.steps must be >= 0");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw ConfigError("ss.eval_fraction must lie in (0, 1)");
  }
  if (eval_interval < 1) throw ConfigError("ss.eval_interval must be >= 1");
  if (encoder.embed_dim < 1) throw ConfigError("ss.embed_dim must be >= 1");
  if (objective == SSObjective::infonce && k != 1) {
    throw ConfigError("ss.objective 'infonce' supports k = 1 only");
  }
}

nn::EncoderSpec encoder_spec_for(const GridConfig& env, const nn::EncoderSpec& base) {
  nn::EncoderSpec spec = base;
  spec.in_channels = env.channels();
  spec.height = env.height;
  spec.width = env.width;
  return spec;
}

nn::Matrix<float> embed_all(const nn::Encoder<float>& encoder,
                            std::span<const Observation* const> obs, std::size_t chunk) {
  nn::Matrix<float> out(encoder.embed_dim(), Eigen::Index(obs.size()));
  for (std::size_t begin = 0; begin < obs.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, obs.size() - begin);
    const auto x = stack_observations<float>(obs.subspan(begin, n));
    out.middleCols(Eigen::Index(begin), Eigen::Index(n)) = encoder.infer(x);
  }
  return out;
}

double inverse_accuracy(SingleStepModel<float>& model, const TransitionDataset& ds,
                        std::span<const std::size_t> indices, int k) {
  if (indices.empty()) return 0.0;
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < indices.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, indices.size() - begin);
    std::vector<const Observation*> obs;
    std::vector<int> actions;
    for (std::size_t i = 0; i < n; ++i) obs.push_back(&ds[indices[begin + i]].obs);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = indices[begin + i];
      obs.push_back(&ds[idx + std::size_t(k) - 1].next_obs);
      actions.push_back(ds[idx].action);
    }
    const auto stats =
        inverse_dynamics_loss(model, stack_observations<float>(obs), actions, 0.0f, false);
    correct += std::size_t(std::lround(stats.accuracy * double(n)));
  }
  return double(correct) / double(indices.size());
}

SingleStepResult train_single_step(const TransitionDataset& ds, const SSTrainConfig& cfg,
                                   std::uint64_t seed) {
  cfg.validate();
  if (ds.empty()) throw InsufficientDataError("single-step training needs a nonempty dataset");

  // Held-out split over valid k-step starts.
  std::vector<std::size_t> starts = cfg.k == 1 ? std::vector<std::size_t>(ds.size())
                                               : k_step_starts(ds, cfg.k);
  if (cfg.k == 1) std::iota(starts.begin(), starts.end(), std::size_t(0));
  Rng split_rng = make_rng(seed, 11);
  std::shuffle(starts.begin(), starts.end(), split_rng);
  const std::size_t n_eval = std::max<std::size_t>(1, std::size_t(cfg.eval_fraction * double(starts.size())));
  if (starts.size() < n_eval + std::size_t(cfg.batch)) {
    throw InsufficientDataError("dataset too small for batch " + std::to_string(cfg.batch) +
                                " plus a held-out split");
  }
  SingleStepResult result;
  result.eval_indices.assign(starts.begin(), starts.begin() + std::ptrdiff_t(n_eval));
  std::sort(result.eval_indices.begin(), result.eval_indices.end());
  const std::vector<std::size_t> train(starts.begin() + std::ptrdiff_t(n_eval), starts.end());
  std::vector<std::size_t> eval_subset = result.eval_indices;
  if (eval_subset.size() > std::size_t(cfg.eval_max_samples)) {
    eval_subset.resize(std::size_t(cfg.eval_max_samples));
  }

  Rng init_rng = make_rng(seed, 12);
  const nn::EncoderSpec spec = encoder_spec_for(ds.env_config, cfg.encoder);
  result.model = SingleStepModel<float>(spec, cfg.inverse_hidden, kNumActions, init_rng);
  auto& model = result.model;
  nn::Adam<float> opt(model.parameters(), float(cfg.learning_rate));

  Rng batch_rng = make_rng(seed, 13);
  DivergenceGuard guard(10.0, 1000);
  double alpha_prev = 0.0;
  double beta = cfg.adaptive_beta ? adaptive_beta(alpha_prev, cfg.beta_max) : cfg.beta_max;

  auto evaluate = [&](int step) {
    const double acc = inverse_accuracy(model, ds, eval_subset, cfg.k);
    result.eval_log.add({double(step), acc, 0.0, beta});
    return acc;
  };

  std::vector<const Transition*> batch(std::size_t(cfg.batch));
  std::vector<KStepSample> kbatch(std::size_t(cfg.batch));
  for (int step = 0; step < cfg.steps; ++step) {
    if (step > 0 && step % cfg.eval_interval == 0) {
      alpha_prev = evaluate(step);
      if (cfg.adaptive_beta) beta = adaptive_beta(alpha_prev, cfg.beta_max);
    }
    const auto picks = sample_indices(train.size(), std::size_t(cfg.batch), batch_rng);
    LossStats s;
    if (cfg.objective == SSObjective::infonce) {
      for (std::size_t i = 0; i < picks.size(); ++i) batch[i] = &ds[train[picks[i]]];
      s = infonce_loss(model, std::span<const Transition* const>(batch), cfg.infonce_distance, true);
    } else if (cfg.k == 1) {
      for (std::size_t i = 0; i < picks.size(); ++i) batch[i] = &ds[train[picks[i]]];
      s = single_step_loss(model, std::span<const Transition* const>(batch), float(beta), true);
    } else {
      for (std::size_t i = 0; i < picks.size(); ++i) {
        const std::size_t idx = train[picks[i]];
        kbatch[i] = {&ds[idx], &ds[idx + std::size_t(cfg.k) - 1].next_obs};
      }
      s = k_step_loss(model, std::span<const KStepSample>(kbatch), float(beta), true);
    }
    opt.step();
    if (!nn::all_finite(opt.params())) {
      throw NumericalError("non-finite parameters after single-step update at step " +
                           std::to_string(step));
    }
    result.log.add({double(step), s.loss, s.nll, s.reg, s.accuracy, beta});
    if (guard.update(s.loss)) {
      throw NumericalError("single-step training diverged at step " + std::to_string(step));
    }
  }
  result.final_eval_accuracy = evaluate(cfg.steps);
  return result;
}

namespace {

std::string to_string(SSObjective o) { return o == SSObjective::inverse ? "inverse" : "infonce"; }
std::string to_string(InfoNceDistance d) { return d == InfoNceDistance::squared_l2 ? "squared_l2" : "l2"; }

}  // namespace

nlohmann::json to_json(const SSTrainConfig& cfg) {
  return {{"beta_max", cfg.beta_max},
          {"adaptive_beta", cfg.adaptive_beta},
          {"k", cfg.k},
          {"learning_rate", cfg.learning_rate},
          {"batch", cfg.batch},
          {"steps", cfg.steps},
          {"eval_fraction", cfg.eval_fraction},
          {"eval_interval", cfg.eval_interval},
          {"eval_max_samples", cfg.eval_max_samples},
          {"objective", to_string(cfg.objective)},
          {"infonce_distance", to_string(cfg.infonce_distance)},
          {"inverse_hidden", cfg.inverse_hidden},
          {"channels", cfg.encoder.channels},
          {"strides", cfg.encoder.strides},
          {"embed_dim", cfg.encoder.embed_dim}};
}

SSTrainConfig ss_config_from_json(const nlohmann::json& j, const std::string& path) {
  using namespace json_util;
  reject_unknown(j, {"beta_max", "adaptive_beta", "k", "learning_rate", "batch", "steps",
                     "eval_fraction", "eval_interval", "eval_max_samples", "objective",
                     "infonce_distance", "inverse_hidden", "channels", "strides", "embed_dim"},
                 path);
  SSTrainConfig cfg;
  read(j, "beta_max", cfg.beta_max, path);
  read(j, "adaptive_beta", cfg.adaptive_beta, path);
  read(j, "k", cfg.k, path);
  read(j, "learning_rate", cfg.learning_rate, path);
  read(j, "batch", cfg.batch, path);
  read(j, "steps", cfg.steps, path);
  read(j, "eval_fraction", cfg.eval_fraction, path);
  read(j, "eval_interval", cfg.eval_interval, path);
  read(j, "eval_max_samples", cfg.eval_max_samples, path);
  std::string objective = to_string(cfg.objective), distance = to_string(cfg.infonce_distance);
  read(j, "objective", objective, path);
  read(j, "infonce_distance", distance, path);
  if (objective == "inverse") cfg.objective = SSObjective::inverse;
  else if (objective == "infonce") cfg.objective = SSObjective::infonce;
  else throw ConfigError("invalid value at '" + join(path, "objective") + "': " + objective);
  if (distance == "squared_l2") cfg.infonce_distance = InfoNceDistance::squared_l2;
  else if (distance == "l2") cfg.infonce_distance = InfoNceDistance::l2;
  else throw ConfigError("invalid value at '" + join(path, "infonce_distance") + "': " + distance);
  read(j, "inverse_hidden", cfg.inverse_hidden, path);
  read(j, "channels", cfg.encoder.channels, path);
  read(j, "strides", cfg.encoder.strides, path);
  read(j, "embed_dim", cfg.encoder.embed_dim, path);
  cfg.validate();
  return cfg;
}

void save_single_step(const std::filesystem::path& dir, SingleStepModel<float>& model,
                      const MetricLog& log, const SSTrainConfig& cfg) {
  nn::ParamArchive archive;
  archive.add(model.parameters());
  archive.meta = {{"kind", "single_step"},
                  {"encoder", nn::to_json(model.encoder.spec())},
                  {"inverse_hidden", cfg.inverse_hidden},
                  {"n_actions", model.n_actions()},
                  {"config", to_json(cfg)}};
  archive.save(dir);
  log.save(dir / "train_log.csv");
}

SingleStepModel<float> load_single_step(const std::filesystem::path& dir) {
  const auto archive = nn::ParamArchive::load(dir);
  if (archive.meta.value("kind", std::string()) != "single_step") {
    throw DependencyError(dir.string() + " is not a single-step checkpoint");
  }
  Rng rng(0);
  SingleStepModel<float> model(nn::encoder_spec_from_json(archive.meta.at("encoder")),
                               archive.meta.at("inverse_hidden").get<std::vector<int>>(),
                               archive.meta.at("n_actions").get<int>(), rng);
  archive.assign(model.parameters(), "", "");
  return model;
}

nn::Encoder<float> load_encoder(const std::filesystem::path& dir) {
  const auto archive = nn::ParamArchive::load(dir);
  if (!archive.meta.contains("encoder")) {
    throw ShapeError(dir.string() + ": checkpoint has no encoder descriptor");
  }
  Rng rng(0);
  nn::Encoder<float> encoder(nn::encoder_spec_from_json(archive.meta.at("encoder")), rng);
  archive.assign(encoder.parameters("encoder"), "encoder", "encoder");
  return encoder;
}

}  // namespace abisim
