#include "doctest.h"

#include <cmath>

#include "abisim/single_step.hpp"
#include "abisim/tabular_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace abisim;

namespace {

GridConfig small_env() {
  GridConfig g;
  g.width = 6;
  g.height = 6;
  g.n_obstacles = 3;
  g.goal = {3, 3};
  return g;
}

nn::EncoderSpec small_spec() {
  nn::EncoderSpec spec;
  spec.height = 6;
  spec.width = 6;
  spec.channels = {3, 4, 2};
  spec.embed_dim = 5;
  return spec;
}

std::vector<const Transition*> pointers(const TransitionDataset& ds) {
  std::vector<const Transition*> out;
  for (const auto& t : ds.transitions) out.push_back(&t);
  return out;
}

template <typename Model>
void zero_all(Model& m) {
  for (auto& p : m.parameters()) p.value->setZero();
}

nn::ParamView<double> find(const nn::ParamList<double>& params, const std::string& name) {
  for (const auto& p : params)
    if (p.name == name) return p;
  FAIL("no parameter named " << name);
  return params.front();
}

/// Exact accuracy of the MAP guess of a_t from (s_t, s_{t+k}) on a clamped chain with uniform
/// actions and a uniform start, by enumerating every action sequence.
double chain_bayes_by_paths(int length, int k) {
  // joint[s][a][s'] = P(s_t = s, a_t = a, s_{t+k} = s')
  std::vector<std::vector<std::vector<double>>> joint(
      std::size_t(length), std::vector<std::vector<double>>(2, std::vector<double>(std::size_t(length), 0.0)));
  const long paths = 1L << k;
  for (int s = 0; s < length; ++s) {
    for (long bits = 0; bits < paths; ++bits) {
      int x = s;
      for (int step = 0; step < k; ++step) {
        const int a = int((bits >> step) & 1);
        x = std::clamp(x + (a ? 1 : -1), 0, length - 1);
      }
      joint[s][bits & 1][x] += 1.0 / length / double(paths);
    }
  }
  double acc = 0.0;
  for (int s = 0; s < length; ++s)
    for (int e = 0; e < length; ++e) acc += std::max(joint[s][0][e], joint[s][1][e]);
  return acc;
}

}  // namespace

TEST_CASE("uniform logits give ln 4") {
  const nn::Matrix<double> logits = nn::Matrix<double>::Zero(4, 8);
  const std::vector<int> actions{0, 1, 2, 3, 0, 1, 2, 3};
  const auto s = detail::cross_entropy<double>(logits, actions, nullptr);
  CHECK(s.nll == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("all-zero embeddings contribute no regularization") {
  const auto ds = collect_random(small_env(), 16, 1);
  Rng rng(1);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  zero_all(m);
  const auto s = single_step_loss<double>(m, pointers(ds), 1e-4, false);
  CHECK(s.reg == 0.0);
  CHECK(s.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("loss composes NLL and the L1 penalty") {
  // Zero weights everywhere, then biases chosen so that |psi|_1 = 10 for every observation and
  // the NLL of the true action is exactly 1.
  const auto ds = collect_random(small_env(), 200, 1);
  std::vector<const Transition*> batch;
  for (const auto& t : ds.transitions)
    if (t.action == 2) batch.push_back(&t);
  REQUIRE(batch.size() > 10);
  Rng rng(1);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  zero_all(m);
  auto params = m.parameters();
  find(params, "encoder.fc.bias").value->setConstant(2.0);  // 5 dims x 2 = 10
  auto out_bias = find(params, "inverse.l1.bias").value;
  out_bias->setZero();
  (*out_bias)(2, 0) = std::log(3.0 / (std::exp(1.0) - 1.0));
  const auto s = single_step_loss<double>(m, batch, 1e-4, false);
  CHECK(s.nll == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.reg == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(s.loss == doctest::Approx(1.002).epsilon(1e-12));
}

TEST_CASE("single-step loss gradient matches central differences") {
  const auto ds = collect_random(small_env(), 16, 3);
  Rng rng(1);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  const auto batch = pointers(ds);
  auto params = m.parameters();
  params.pop_back();  // action embeddings are unused by this objective
  nn::zero_grad(params);
  single_step_loss<double>(m, batch, 0.01, true);
  const auto r = gradcheck::compare(params, [&] { return single_step_loss<double>(m, batch, 0.01, false).loss; });
  CHECK(r.checked > 50);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("k-step loss gradient matches central differences") {
  const auto ds = collect_random(small_env(), 200, 3);
  Rng rng(1), sample_rng(9);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  const auto ks = sample_k_step(ds, 12, 5, sample_rng);
  auto params = m.parameters();
  params.pop_back();
  nn::zero_grad(params);
  k_step_loss<double>(m, ks, 0.01, true);
  const auto r = gradcheck::compare(params, [&] { return k_step_loss<double>(m, ks, 0.01, false).loss; });
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("InfoNCE gradient through the encoder matches central differences") {
  const auto ds = collect_random(small_env(), 16, 3);
  Rng rng(1);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  const auto batch = pointers(ds);
  for (auto dist : {InfoNceDistance::squared_l2, InfoNceDistance::l2}) {
    auto params = m.parameters();
    nn::zero_grad(params);
    infonce_loss<double>(m, batch, dist, true);
    const auto r = gradcheck::compare(params, [&] { return infonce_loss<double>(m, batch, dist, false).loss; });
    CHECK(r.worst_relative < 1e-4);
  }
}

TEST_CASE("k = 1 reduces to the single-step loss") {
  const auto ds = collect_random(small_env(), 64, 3);
  Rng rng(2), sample_rng(4);
  SingleStepModel<double> m(small_spec(), {7}, 4, rng);
  const auto ks = sample_k_step(ds, 16, 1, sample_rng);
  std::vector<const Transition*> batch;
  for (const auto& s : ks) batch.push_back(s.start);
  const auto a = k_step_loss<double>(m, ks, 1e-4, false);
  const auto b = single_step_loss<double>(m, batch, 1e-4, false);
  CHECK(a.loss == b.loss);
  CHECK(SSTrainConfig{}.k == 1);
}

TEST_CASE("k-step Bayes accuracy on a random-walk chain") {
  for (int k : {1, 2, 4, 8}) {
    const double ref = chain_bayes_by_paths(6, k);
    CHECK(oracle::kstep_bayes_accuracy(oracle::chain_mdp(6), k) == doctest::Approx(ref).epsilon(1e-12));
  }
  CHECK(chain_bayes_by_paths(6, 1) == doctest::Approx(1.0).epsilon(1e-12));
  // Mixing erases the first action: accuracy approaches chance.
  CHECK(oracle::kstep_bayes_accuracy(oracle::chain_mdp(4), 40) < 0.5 + 1e-3);
}

TEST_CASE("InfoNCE objective") {
  using Mat = nn::Matrix<double>;
  SUBCASE("equal distances give ln |A|") {
    Mat pair = Mat::Zero(3, 5);
    Mat emb = Mat::Ones(3, 4);
    const std::vector<int> actions{0, 1, 2, 3, 0};
    const auto s = infonce_loss_from_pairs<double>(pair, emb, actions, InfoNceDistance::squared_l2, nullptr, nullptr);
    CHECK(s.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("a dominant margin drives the loss to zero") {
    Mat pair = Mat::Zero(1, 1);
    Mat emb(1, 2);
    emb << 0.0, 30.0;
    const std::vector<int> actions{0};
    const auto s = infonce_loss_from_pairs<double>(pair, emb, actions, InfoNceDistance::squared_l2, nullptr, nullptr);
    CHECK(s.loss < 1e-12);
  }
  SUBCASE("two-parameter gradient check") {
    for (auto dist : {InfoNceDistance::squared_l2, InfoNceDistance::l2}) {
      Mat pair(1, 3);
      pair << 0.3, -0.2, 0.9;
      Mat emb(1, 2);
      emb << 0.1, 0.7;
      const std::vector<int> actions{0, 1, 1};
      Mat dpair, demb;
      infonce_loss_from_pairs<double>(pair, emb, actions, dist, &dpair, &demb);
      Mat grad = demb;
      nn::ParamList<double> params{{"emb", &emb, &grad}};
      const auto r = gradcheck::compare(params, [&] {
        return infonce_loss_from_pairs<double>(pair, emb, actions, dist, nullptr, nullptr).loss;
      });
      CHECK(r.checked == 2);
      CHECK(r.worst_relative < 1e-4);
      Mat gpair = dpair;
      nn::ParamList<double> pp{{"pair", &pair, &gpair}};
      CHECK(gradcheck::compare(pp, [&] {
              return infonce_loss_from_pairs<double>(pair, emb, actions, dist, nullptr, nullptr).loss;
            }).worst_relative < 1e-4);
    }
  }
  SUBCASE("a single action is a degenerate contrast") {
    Mat pair = Mat::Zero(2, 1), emb = Mat::Zero(2, 1);
    const std::vector<int> actions{0};
    CHECK_THROWS_AS(infonce_loss_from_pairs<double>(pair, emb, actions, InfoNceDistance::squared_l2, nullptr, nullptr),
                    ConfigError);
  }
}

TEST_CASE("adaptive beta schedule") {
  CHECK(adaptive_beta(0.0, 1e-4) == 0.0);
  CHECK(adaptive_beta(1.0, 1.0) == doctest::Approx(0.98168).epsilon(1e-5));
  CHECK(adaptive_beta(0.5, 1.0) == doctest::Approx(0.63212).epsilon(1e-5));
}

TEST_CASE("training defaults") {
  SSTrainConfig cfg;
  CHECK(cfg.beta_max == 1e-4);
  CHECK(cfg.learning_rate == 1e-4);
  CHECK(cfg.steps == 20000);
}

TEST_CASE("seeded training is deterministic and checkpoints roundtrip") {
  const auto ds = collect_random(small_env(), 600, 5);
  SSTrainConfig cfg;
  cfg.steps = 30;
  cfg.eval_interval = 10;
  cfg.encoder = small_spec();
  auto a = train_single_step(ds, cfg, 7);
  auto b = train_single_step(ds, cfg, 7);
  CHECK(a.log.last("loss") == b.log.last("loss"));
  CHECK(nn::fingerprint(a.model.parameters()) == nn::fingerprint(b.model.parameters()));

  const auto dir = std::filesystem::temp_directory_path() / "abisim_test_ss_ckpt";
  std::filesystem::remove_all(dir);
  save_single_step(dir, a.model, a.log, cfg);
  auto loaded = load_single_step(dir);
  CHECK(nn::fingerprint(loaded.parameters()) == nn::fingerprint(a.model.parameters()));
  auto enc = load_encoder(dir);
  CHECK(nn::fingerprint(enc.parameters()) == nn::fingerprint(a.model.encoder.parameters()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid training configs") {
  SSTrainConfig cfg;
  cfg.k = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(ss_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
}
