#include "abisim/rl.hpp"

#include <cmath>

#include "abisim/features.hpp"
#include "abisim/json_util.hpp"
#include "abisim/nn/checkpoint.hpp"
#include "abisim/nn/optim.hpp"
#include "abisim/single_step.hpp"

namespace abisim {

std::string to_string(EncoderInit e) {
  switch (e) {
    case EncoderInit::none: return "none";
    case EncoderInit::ssi: return "ssi";
    case EncoderInit::acro: return "acro";
    case EncoderInit::abisim: return "abisim";
    case EncoderInit::path: return "path";
  }
  return "none";
}

EncoderInit encoder_init_from_string(const std::string& s) {
  for (auto e : {EncoderInit::none, EncoderInit::ssi, EncoderInit::acro, EncoderInit::abisim,
                 EncoderInit::path}) {
    if (to_string(e) == s) return e;
  }
  throw ConfigError("unknown encoder_init '" + s + "'");
}

void RLConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("rl.gamma must lie in (0, 1)");
  if (batch < 1) throw ConfigError("rl.batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("rl.lr must be > 0");
  if (!(eps_end <= eps_start)) throw ConfigError("rl.eps_end must not exceed rl.eps_start");
  if (eps_start > 1.0 || eps_end < 0.0) throw ConfigError("rl epsilons must lie in [0, 1]");
  if (!(eps_decay_fraction > 0.0 && eps_decay_fraction <= 1.0)) {
    throw ConfigError("rl.eps_decay_fraction must lie in (0, 1]");
  }
  if (target_update_period < 1) throw ConfigError("rl.target_update_period must be >= 1");
  if (replay_capacity < batch) throw ConfigError("rl.replay_capacity must be >= rl.batch");
  if (total_steps < 0) throw ConfigError("rl.total_steps must be >= 0");
  if (eval_every < 1 || eval_episodes < 1) throw ConfigError("rl evaluation settings must be >= 1");
  if (train_every < 1) throw ConfigError("rl.train_every must be >= 1");
  if (q_hidden < 1) throw ConfigError("rl.q_hidden must be >= 1");
}

nlohmann::json to_json(const RLConfig& cfg) {
  return {{"gamma", cfg.gamma},
          {"batch", cfg.batch},
          {"lr", cfg.lr},
          {"eps_start", cfg.eps_start},
          {"eps_end", cfg.eps_end},
          {"eps_decay_fraction", cfg.eps_decay_fraction},
          {"target_update_period", cfg.target_update_period},
          {"replay_capacity", cfg.replay_capacity},
          {"total_steps", cfg.total_steps},
          {"eval_every", cfg.eval_every},
          {"eval_episodes", cfg.eval_episodes},
          {"learning_starts", cfg.learning_starts},
          {"train_every", cfg.train_every},
          {"q_hidden", cfg.q_hidden},
          {"encoder_init", to_string(cfg.encoder_init)},
          {"encoder_checkpoint", cfg.encoder_checkpoint},
          {"channels", cfg.encoder.channels},
          {"strides", cfg.encoder.strides},
          {"embed_dim", cfg.encoder.embed_dim}};
}

RLConfig rl_config_from_json(const nlohmann::json& j, const std::string& path) {
  using namespace json_util;
  reject_unknown(j, {"gamma", "batch", "lr", "eps_start", "eps_end", "eps_decay_fraction",
                     "target_update_period", "replay_capacity", "total_steps", "eval_every",
                     "eval_episodes", "learning_starts", "train_every", "q_hidden",
                     "encoder_init", "encoder_checkpoint", "channels", "strides", "embed_dim"},
                 path);
  RLConfig cfg;
  read(j, "gamma", cfg.gamma, path);
  read(j, "batch", cfg.batch, path);
  read(j, "lr", cfg.lr, path);
  read(j, "eps_start", cfg.eps_start, path);
  read(j, "eps_end", cfg.eps_end, path);
  read(j, "eps_decay_fraction", cfg.eps_decay_fraction, path);
  read(j, "target_update_period", cfg.target_update_period, path);
  read(j, "replay_capacity", cfg.replay_capacity, path);
  read(j, "total_steps", cfg.total_steps, path);
  read(j, "eval_every", cfg.eval_every, path);
  read(j, "eval_episodes", cfg.eval_episodes, path);
  read(j, "learning_starts", cfg.learning_starts, path);
  read(j, "train_every", cfg.train_every, path);
  read(j, "q_hidden", cfg.q_hidden, path);
  std::string init = to_string(cfg.encoder_init);
  read(j, "encoder_init", init, path);
  try {
    cfg.encoder_init = encoder_init_from_string(init);
  } catch (const ConfigError&) {
    throw ConfigError("invalid value at '" + join(path, "encoder_init") + "': " + init);
  }
  read(j, "encoder_checkpoint", cfg.encoder_checkpoint, path);
  read(j, "channels", cfg.encoder.channels, path);
  read(j, "strides", cfg.encoder.strides, path);
  read(j, "embed_dim", cfg.encoder.embed_dim, path);
  cfg.validate();
  return cfg;
}

double epsilon_by_step(long t, const RLConfig& cfg) {
  const double horizon = cfg.eps_decay_fraction * double(cfg.total_steps);
  if (horizon <= 0.0 || double(t) >= horizon) return t <= 0 ? cfg.eps_start : cfg.eps_end;
  const double frac = std::max(0.0, double(t)) / horizon;
  return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start);
}

int QNetwork::greedy_action(const Observation& obs) const {
  const Observation* p = &obs;
  const nn::Matrix<float> q = infer(stack_observations<float>(std::span<const Observation* const>(&p, 1)));
  Eigen::Index best;
  q.col(0).maxCoeff(&best);
  return int(best);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay capacity must be positive");
  items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void ReplayBuffer::add(Item item) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(item));
  } else {
    items_[next_] = std::move(item);
  }
  next_ = (next_ + 1) % capacity_;
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t batch, Rng& rng) const {
  if (items_.empty()) throw InsufficientDataError("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

EvalStats evaluate_policy(const Policy& policy, const GridConfig& env, int episodes,
                          std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  GridWorld world(env);
  EvalStats stats;
  for (int e = 0; e < episodes; ++e) {
    auto reset = world.reset(derive_seed(seed, 5000 + std::uint64_t(e)));
    GridState state = std::move(reset.state);
    Observation obs = std::move(reset.observation);
    double ret = 0.0;
    for (int t = 0; t < env.episode_len; ++t) {
      StepResult r = world.step(state, static_cast<Action>(policy(state, obs)));
      ret += r.reward;
      state = std::move(r.state);
      obs = std::move(r.observation);
    }
    stats.returns.push_back(ret);
  }
  double sum = 0.0;
  for (double r : stats.returns) sum += r;
  stats.mean = sum / episodes;
  if (episodes > 1) {
    double sq = 0.0;
    for (double r : stats.returns) sq += (r - stats.mean) * (r - stats.mean);
    stats.ci95 = 1.96 * std::sqrt(sq / (episodes - 1)) / std::sqrt(double(episodes));
  }
  return stats;
}

EvalStats evaluate_policy(const QNetwork& q, const GridConfig& env, int episodes,
                          std::uint64_t seed) {
  return evaluate_policy([&q](const GridState&, const Observation& obs) { return q.greedy_action(obs); },
                         env, episodes, seed);
}

Policy shortest_path_policy(const GridConfig& env) {
  return [env](const GridState& state, const Observation&) {
    const auto dist = shortest_path_lengths(state.obstacles, state.goal);
    GridWorld world(env);
    int best = 0, best_d = -1;
    for (int a = 0; a < kNumActions; ++a) {
      const Cell next = world.next_agent(state, static_cast<Action>(a));
      const int d = dist(next.y, next.x);
      if (d >= 0 && (best_d < 0 || d < best_d)) {
        best_d = d;
        best = a;
      }
    }
    return best;
  };
}

nn::Encoder<float> make_rl_encoder(const GridConfig& env, const RLConfig& cfg, Rng& rng) {
  if (cfg.encoder_init == EncoderInit::none) {
    return nn::Encoder<float>(encoder_spec_for(env, cfg.encoder), rng);
  }
  if (cfg.encoder_checkpoint.empty()) {
    throw ConfigError("rl.encoder_init '" + to_string(cfg.encoder_init) +
                      "' needs rl.encoder_checkpoint");
  }
  const auto archive = nn::ParamArchive::load(cfg.encoder_checkpoint);
  nn::EncoderSpec spec = cfg.encoder;
  if (archive.meta.contains("encoder")) spec = nn::encoder_spec_from_json(archive.meta.at("encoder"));
  // The env dictates the input geometry; any disagreement surfaces as mismatched arrays.
  spec = encoder_spec_for(env, spec);
  nn::Encoder<float> encoder(spec, rng);
  archive.assign(encoder.parameters("encoder"), "encoder", "encoder");
  return encoder;
}

DQNResult dqn_train(const GridConfig& env, const RLConfig& cfg, std::uint64_t seed,
                    const DQNHook& hook) {
  cfg.validate();
  env.validate();
  Rng init_rng = make_rng(seed, 41);
  DQNResult result;
  result.q = QNetwork(make_rl_encoder(env, cfg, init_rng), cfg.q_hidden, kNumActions, init_rng);
  result.initial_encoder_fingerprint = nn::fingerprint(result.q.encoder.parameters("encoder"));
  QNetwork& online = result.q;
  QNetwork target = online;
  const auto online_params = online.parameters();
  const auto target_params = target.parameters();
  nn::Adam<float> opt(online_params, float(cfg.lr));

  GridWorld world(env);
  ReplayBuffer replay(std::size_t(cfg.replay_capacity));
  Rng act_rng = make_rng(seed, 42), batch_rng = make_rng(seed, 43);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> random_action(0, kNumActions - 1);

  long episode = 0;
  auto reset = world.reset(derive_seed(seed, 7000 + std::uint64_t(episode)));
  GridState state = std::move(reset.state);
  Observation obs = std::move(reset.observation);
  double loss_sum = 0.0;
  long loss_count = 0;

  const std::size_t batch = std::size_t(cfg.batch);
  std::vector<const Observation*> cur(batch), nxt(batch);
  for (long step = 1; step <= cfg.total_steps; ++step) {
    const double eps = epsilon_by_step(step - 1, cfg);
    const int a = unif(act_rng) < eps ? random_action(act_rng) : online.greedy_action(obs);
    StepResult r = world.step(state, static_cast<Action>(a));
    replay.add({obs, a, r.reward, r.observation});
    if (r.done) {
      ++episode;
      reset = world.reset(derive_seed(seed, 7000 + std::uint64_t(episode)));
      state = std::move(reset.state);
      obs = std::move(reset.observation);
    } else {
      state = std::move(r.state);
      obs = std::move(r.observation);
    }

    if (step >= cfg.learning_starts && replay.size() >= batch && step % cfg.train_every == 0) {
      const auto idx = replay.sample(batch, batch_rng);
      for (std::size_t k = 0; k < batch; ++k) {
        cur[k] = &replay[idx[k]].obs;
        nxt[k] = &replay[idx[k]].next_obs;
      }
      // Episodes end only by the time limit, so every transition bootstraps.
      const nn::Matrix<float> q_next =
          target.infer(stack_observations<float>(std::span<const Observation* const>(nxt)));
      const nn::Matrix<float> q =
          online.forward(stack_observations<float>(std::span<const Observation* const>(cur)));
      nn::Matrix<float> dq = nn::Matrix<float>::Zero(q.rows(), q.cols());
      double loss = 0.0;
      for (std::size_t k = 0; k < batch; ++k) {
        const auto& item = replay[idx[k]];
        const float y = item.reward + float(cfg.gamma) * q_next.col(Eigen::Index(k)).maxCoeff();
        const float delta = q(item.action, Eigen::Index(k)) - y;
        const float ad = std::abs(delta);
        loss += ad <= 1.0f ? 0.5 * double(delta) * delta : double(ad) - 0.5;
        dq(item.action, Eigen::Index(k)) = std::clamp(delta, -1.0f, 1.0f) / float(batch);
      }
      loss /= double(batch);
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite TD loss at step " + std::to_string(step));
      }
      online.backward(dq);
      opt.step();
      ++result.updates;
      loss_sum += loss;
      ++loss_count;
      if (result.updates % cfg.target_update_period == 0) nn::copy_params(target_params, online_params);
    }
    if (hook) hook(step, online, target);

    if (step % cfg.eval_every == 0) {
      const auto stats = evaluate_policy(online, env, cfg.eval_episodes, derive_seed(seed, 99));
      result.curve.add({double(step), stats.mean, stats.ci95,
                        loss_count ? loss_sum / double(loss_count) : 0.0});
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  return result;
}

}  // namespace abisim
