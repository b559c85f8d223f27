#include "doctest.h"

#include <cmath>

#include "abisim/bisim.hpp"
#include "abisim/features.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace abisim;
using Mat = nn::Matrix<double>;

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

Mat random_matrix(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST_CASE("Gaussian NLL at the mean with unit scale") {
  GaussianLatent<double> g{Mat::Constant(6, 3, 0.4), Mat::Ones(6, 3)};
  CHECK(gaussian_nll(g, g.mu) == doctest::Approx(3.0 * std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("forward model scale is floored") {
  Rng rng(1);
  ForwardModel<double> f(4, 4, {8}, rng);
  for (auto& p : f.parameters()) p.value->setZero();
  for (auto& p : f.parameters())
    if (p.name == "forward.l1.bias") p.value->bottomRows(4).setConstant(-50.0);
  const std::vector<int> actions{0, 3};
  const auto g = f.infer(Mat::Ones(4, 2), actions);
  CHECK((g.sigma.array() == kSigmaMin).all());
}

TEST_CASE("forward NLL gradient matches central differences") {
  Rng rng(2);
  ForwardModel<double> f(3, 4, {6, 5}, rng, 0.05);
  const Mat z = random_matrix(3, 7, rng), z_next = random_matrix(3, 7, rng);
  const std::vector<int> actions{0, 1, 2, 3, 0, 2, 1};
  auto params = f.parameters();
  nn::zero_grad(params);
  forward_nll(f, z, actions, z_next, true);
  const auto r = gradcheck::compare(params, [&] { return forward_nll(f, z, actions, z_next, false); }, 20);
  CHECK(r.checked > 40);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("latent W1 surrogate") {
  Rng rng(3);
  const Mat mu = random_matrix(4, 5, rng);
  const Mat sigma = random_matrix(4, 5, rng).cwiseAbs();
  GaussianLatent<double> p{mu, sigma};
  CHECK(latent_w1(p, p).cwiseAbs().maxCoeff() == 0.0);

  GaussianLatent<double> q{mu + Mat::Constant(4, 5, 0.25), sigma};
  const auto w = latent_w1(p, q);
  for (Eigen::Index b = 0; b < w.size(); ++b) CHECK(w(b) == doctest::Approx(1.0).epsilon(1e-12));

  GaussianLatent<double> a{Mat::Constant(1, 1, 0.0), Mat::Constant(1, 1, 0.5)};
  GaussianLatent<double> b{Mat::Constant(1, 1, 0.7), Mat::Constant(1, 1, 0.5)};
  const double ref = oracle_ref::gaussian_w1_quantile(0.0, 0.5, 0.7, 0.5);
  CHECK(latent_w1(a, b)(0) == doctest::Approx(ref).epsilon(1e-6));
  CHECK(ref == doctest::Approx(0.7).epsilon(1e-6));

  GaussianLatent<double> wrong{Mat::Zero(3, 5), Mat::Ones(3, 5)};
  CHECK_THROWS_AS(latent_w1(p, wrong), ShapeError);
}

TEST_CASE("bisimulation targets") {
  Rng rng(4);
  ForwardModel<double> f(5, 4, {8}, rng);
  const Mat psi_i = random_matrix(5, 6, rng), psi_j = random_matrix(5, 6, rng);
  const Mat phi_i = random_matrix(5, 6, rng), phi_j = random_matrix(5, 6, rng);
  TargetSpec spec;

  SUBCASE("identical inputs give zero") {
    CHECK(abisim_target<double>(psi_i, psi_i, phi_i, phi_i, f, spec).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("symmetric in the pair") {
    const auto a = abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec);
    const auto b = abisim_target<double>(psi_j, psi_i, phi_j, phi_i, f, spec);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("c = 0 collapses to the single-step distance") {
    spec.c = 0.0;
    const auto t = abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec);
    CHECK((t - l1_distances(psi_i, psi_j)).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("Monte Carlo expectation with many samples approaches enumeration") {
    spec.expectation = ActionExpectation::monte_carlo;
    spec.mc_samples = 4000;
    Rng mc(9);
    const auto mc_t = abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec, &mc);
    spec.expectation = ActionExpectation::enumerate;
    const auto en_t = abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec);
    CHECK(std::abs(mc_t.mean() - en_t.mean()) < 0.02 * en_t.mean());
  }
  SUBCASE("invalid expectation settings") {
    spec.expectation = ActionExpectation::monte_carlo;
    spec.mc_samples = 0;
    Rng mc(1);
    CHECK_THROWS_AS(abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec, &mc), ConfigError);
    spec.expectation = ActionExpectation::behavioral;
    CHECK_THROWS_AS(abisim_target<double>(psi_i, psi_j, phi_i, phi_j, f, spec), ConfigError);
  }
}

TEST_CASE("bisimulation loss values") {
  Rng rng(5);
  const Mat a = random_matrix(4, 8, rng), b = random_matrix(4, 8, rng);
  const nn::Vector<double> d = l1_distances(a, b);
  CHECK(bisim_loss<double>(a, b, d) == 0.0);
  CHECK(bisim_loss<double>(a, b, d - nn::Vector<double>::Constant(8, 0.3)) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("bisimulation loss gradient through an encoder matches central differences") {
  const auto ds = collect_random(small_env(), 24, 3);
  Rng rng(6);
  nn::Encoder<double> phi(small_spec(), rng);
  std::vector<const Observation*> obs;
  for (std::size_t k = 0; k < 12; ++k) obs.push_back(&ds[k].obs);
  for (std::size_t k = 12; k < 24; ++k) obs.push_back(&ds[k].next_obs);
  const auto inputs = stack_observations<double>(obs);
  const nn::Vector<double> targets = nn::Vector<double>::LinSpaced(12, 0.01, 0.3);
  auto loss = [&](bool backward) {
    const Mat z = backward ? phi.forward(inputs) : phi.infer(inputs);
    Mat di, dj;
    const double l = bisim_loss<double>(z.leftCols(12), z.rightCols(12), targets,
                                        backward ? &di : nullptr, backward ? &dj : nullptr);
    if (backward) {
      Mat dz(z.rows(), 24);
      dz << di, dj;
      phi.backward(dz);
    }
    return l;
  };
  auto params = phi.parameters();
  nn::zero_grad(params);
  loss(true);
  const auto r = gradcheck::compare(params, [&] { return loss(false); });
  CHECK(r.checked > 50);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("EMA update identities") {
  Mat online = Mat::Constant(2, 2, 2.0), target = Mat::Zero(2, 2);
  Mat g1 = Mat::Zero(2, 2), g2 = Mat::Zero(2, 2);
  nn::ParamList<double> on{{"w", &online, &g1}}, tg{{"w", &target, &g2}};
  nn::ema_update(tg, on, 0.5);
  CHECK((target.array() == 1.0).all());
  nn::ema_update(tg, on, 0.0);
  CHECK((target.array() == 1.0).all());
  nn::ema_update(tg, on, 1.0);
  CHECK(target == online);
}

TEST_CASE("configuration defaults and validation") {
  BisimConfig cfg;
  CHECK(cfg.c == 0.99);
  CHECK(cfg.tau == 0.005);
  cfg.c = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.mc_samples = 0;
  cfg.action_expectation = ActionExpectation::monte_carlo;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(bisim_config_from_json(nlohmann::json{{"tua", 0.1}}), ConfigError);
}

TEST_CASE("training leaves the single-step encoder untouched and is reproducible") {
  const auto ds = collect_random(small_env(), 400, 2);
  Rng rng(7);
  nn::Encoder<float> psi(small_spec(), rng);
  const auto before = nn::fingerprint(psi.parameters());
  BisimConfig cfg;
  cfg.steps = 20;
  cfg.batch = 16;
  cfg.forward_hidden = {16};
  auto a = train_action_bisim(ds, psi, cfg, 3);
  auto b = train_action_bisim(ds, psi, cfg, 3);
  CHECK(nn::fingerprint(psi.parameters()) == before);
  CHECK(a.psi_checksum_before == a.psi_checksum_after);
  CHECK(a.log.last("bisim_loss") == b.log.last("bisim_loss"));
  CHECK(a.iterations == 20);

  const auto dir = std::filesystem::temp_directory_path() / "abisim_test_bisim_ckpt";
  std::filesystem::remove_all(dir);
  save_bisim(dir, a.model, a.log, cfg);
  auto loaded = load_bisim(dir);
  CHECK(nn::fingerprint(loaded.phi.parameters()) == nn::fingerprint(a.model.phi.parameters()));
  std::filesystem::remove_all(dir);
}
