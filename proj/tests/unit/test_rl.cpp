#include "doctest.h"

#include "abisim/nn/checkpoint.hpp"
#include "abisim/rl.hpp"
#include "support/oracles.hpp"

using namespace abisim;

namespace {

GridConfig open_grid(int size) {
  GridConfig g;
  g.width = g.height = size;
  g.n_obstacles = 0;
  g.goal = {size / 2, size / 2};
  return g;
}

GridState start_at(const GridConfig& cfg, Cell agent) {
  GridState s;
  s.agent = agent;
  s.goal = cfg.goal;
  s.obstacles = OccupancyGrid::Constant(cfg.height, cfg.width, false);
  return s;
}

/// Undiscounted episode return from `s` under `policy`.
double rollout(const GridWorld& world, GridState s, const Policy& policy) {
  double ret = 0.0;
  Observation obs = world.render(s);
  for (int t = 0; t < world.config().episode_len; ++t) {
    auto r = world.step(s, Action(policy(s, obs)));
    ret += r.reward;
    s = r.state;
    obs = r.observation;
  }
  return ret;
}

/// Reward arrives after the move, so reaching the goal in d moves costs d - 1.
double optimal_return(int d) { return -std::max(d - 1, 0); }

}  // namespace

TEST_CASE("defaults") {
  RLConfig cfg;
  CHECK(cfg.gamma == 0.99);
  CHECK(cfg.batch == 32);
  CHECK(cfg.lr == 1e-4);
  CHECK(cfg.eps_start == 0.9);
  CHECK(cfg.eps_end == 0.2);
}

TEST_CASE("epsilon schedule") {
  RLConfig cfg;
  cfg.total_steps = 1000;
  CHECK(epsilon_by_step(0, cfg) == 0.9);
  CHECK(epsilon_by_step(500, cfg) == 0.2);
  CHECK(epsilon_by_step(900, cfg) == 0.2);
  CHECK(epsilon_by_step(250, cfg) == doctest::Approx(0.55).epsilon(1e-12));
}

TEST_CASE("optimal policy return from every start cell") {
  for (int size : {5, 7}) {
    const GridConfig cfg = open_grid(size);
    GridWorld world(cfg);
    const auto policy = shortest_path_policy(cfg);
    const auto dist = oracle_ref::relaxation_distances(
        oracle_ref::to_chars(OccupancyGrid::Constant(size, size, false)), cfg.goal.x, cfg.goal.y);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        CHECK(rollout(world, start_at(cfg, {x, y}), policy) == optimal_return(dist[y][x]));
      }
    }
  }
}

TEST_CASE("evaluation statistics") {
  GridConfig cfg;
  const auto policy = shortest_path_policy(cfg);
  const auto a = evaluate_policy(policy, cfg, 12, 3);
  const auto b = evaluate_policy(policy, cfg, 12, 3);
  CHECK(a.returns == b.returns);
  CHECK(a.ci95 == b.ci95);
  Rng rng(1);
  const Policy random_policy = [&rng](const GridState&, const Observation&) { return int(rng() % 4); };
  const auto r = evaluate_policy(random_policy, cfg, 12, 3);
  for (double v : r.returns) {
    CHECK(v <= 0.0);
    CHECK(v >= -cfg.episode_len);
  }
  for (std::size_t i = 0; i < a.returns.size(); ++i) CHECK(a.returns[i] >= r.returns[i]);
  CHECK_THROWS_AS(evaluate_policy(policy, cfg, 0, 3), ConfigError);
}

TEST_CASE("replay buffer is a ring") {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) buf.add({Observation{}, i, 0.0f, Observation{}});
  CHECK(buf.size() == 3);
  std::vector<int> actions;
  for (std::size_t i = 0; i < buf.size(); ++i) actions.push_back(buf[i].action);
  std::sort(actions.begin(), actions.end());
  CHECK(actions == std::vector<int>{2, 3, 4});
  Rng rng(2);
  for (auto i : buf.sample(50, rng)) CHECK(i < 3);
}

TEST_CASE("pretrained encoder is loaded verbatim") {
  const GridConfig env = open_grid(5);
  nn::EncoderSpec spec;
  spec.height = spec.width = 5;
  spec.embed_dim = 8;
  Rng rng(3);
  nn::Encoder<float> enc(spec, rng);
  const auto dir = std::filesystem::temp_directory_path() / "abisim_test_rl_enc";
  std::filesystem::remove_all(dir);
  nn::ParamArchive archive;
  archive.add(enc.parameters());
  archive.meta = {{"kind", "single_step"}, {"encoder", nn::to_json(spec)}};
  archive.save(dir);

  RLConfig cfg;
  cfg.encoder = spec;
  cfg.encoder_init = EncoderInit::path;
  cfg.encoder_checkpoint = dir.string();
  cfg.total_steps = 50;
  cfg.learning_starts = 10;
  cfg.eval_every = 50;
  cfg.eval_episodes = 1;
  std::string first_fingerprint;
  auto result = dqn_train(env, cfg, 1, [&](long step, const QNetwork& online, const QNetwork&) {
    if (step == 1) first_fingerprint = nn::fingerprint(const_cast<QNetwork&>(online).encoder.parameters());
  });
  CHECK(result.initial_encoder_fingerprint == nn::fingerprint(enc.parameters()));
  CHECK(result.updates > 0);
  CHECK(nn::fingerprint(result.q.encoder.parameters()) != nn::fingerprint(enc.parameters()));

  cfg.encoder_checkpoint = (dir / "missing").string();
  CHECK_THROWS_AS(dqn_train(env, cfg, 1), DependencyError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid configs") {
  RLConfig cfg;
  cfg.gamma = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(rl_config_from_json(nlohmann::json{{"gama", 0.9}}), ConfigError);
  CHECK_THROWS_AS(encoder_init_from_string("bogus"), ConfigError);
}

TEST_CASE("DQN learns the shortest path on a small open grid" * doctest::timeout(900)) {
  const GridConfig env = open_grid(5);
  RLConfig cfg;
  cfg.total_steps = 50000;
  cfg.eval_every = 10000;
  cfg.eval_episodes = 5;
  cfg.encoder.height = cfg.encoder.width = 5;
  auto result = dqn_train(env, cfg, 0);
  GridWorld world(env);
  const Policy greedy = [&](const GridState&, const Observation& o) { return result.q.greedy_action(o); };
  const auto dist = oracle_ref::relaxation_distances(
      oracle_ref::to_chars(OccupancyGrid::Constant(5, 5, false)), env.goal.x, env.goal.y);
  int optimal = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) optimal += rollout(world, start_at(env, {x, y}), greedy) == optimal_return(dist[y][x]);
  CHECK(optimal >= int(std::ceil(0.9 * 25)));
}
