#include "doctest.h"

#include <cmath>

#include "abisim/analysis.hpp"
#include "abisim/single_step.hpp"

using namespace abisim;
using namespace abisim::analysis;

namespace {

nn::EncoderSpec spec_for(int size) {
  nn::EncoderSpec spec;
  spec.height = spec.width = size;
  spec.channels = {4, 4, 4};
  spec.embed_dim = 8;
  return spec;
}

nn::Encoder<float> constant_encoder(int size) {
  Rng rng(1);
  nn::Encoder<float> enc(spec_for(size), rng);
  for (auto& p : enc.parameters()) {
    if (p.name == "encoder.fc.bias") p.value->setConstant(0.5f);
    else p.value->setZero();
  }
  return enc;
}

PerturbationMap synthetic_map(Cell agent) {
  PerturbationMap m;
  m.base.agent = agent;
  m.response = Eigen::MatrixXd::Zero(7, 7);
  m.response(agent.y, agent.x) = std::numeric_limits<double>::quiet_NaN();
  return m;
}

}  // namespace

TEST_CASE("constant encoder yields an all-zero map") {
  GridConfig cfg;
  GridWorld world(cfg);
  const auto s = world.reset(2).state;
  const auto map = perturbation_map(constant_encoder(15), world, s, "const");
  CHECK(map.masked(s.agent.x, s.agent.y));
  CHECK(map.masked(s.goal.x, s.goal.y));
  CHECK(map.total() == 0.0);
}

TEST_CASE("an observation compared with itself has zero distance") {
  GridConfig cfg;
  GridWorld world(cfg);
  Rng rng(1);
  nn::Encoder<float> enc(spec_for(15), rng);
  std::vector<Observation> obs{world.reset(1).observation, world.reset(2).observation};
  CHECK(embedding_distances(enc, obs, obs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("map summaries on synthetic responses") {
  auto m = synthetic_map({3, 3});
  m.response(3, 4) = 2.0;  // distance 1
  m.response(0, 0) = 2.0;  // distance 3
  CHECK(band_fraction(m, 1, 1) == doctest::Approx(0.5));
  CHECK(band_fraction(m, 2, 3) == doctest::Approx(0.5));
  CHECK(response_radius(m) == doctest::Approx(2.0));
  const auto prof = radial_profile(m);
  CHECK(std::isnan(prof[0]));
  CHECK(prof[1] == doctest::Approx(2.0 / 8.0));
  CHECK(prof[3] == doctest::Approx(2.0 / 24.0));
  CHECK(response_radius(synthetic_map({3, 3})) == 0.0);
}

TEST_CASE("near/far sensitivity") {
  GridConfig cfg;
  Rng rng(2);
  nn::Encoder<float> enc(spec_for(15), rng);
  SUBCASE("empty report") { CHECK_THROWS_AS(near_far_sensitivity(enc, cfg, 0, 3, 6, 0), InsufficientDataError); }
  SUBCASE("bad radii") { CHECK_THROWS_AS(near_far_sensitivity(enc, cfg, 4, 6, 3, 0), ConfigError); }
  SUBCASE("identical bands by construction give identical distance sets") {
    GridWorld world(cfg);
    const auto layouts = sample_layouts(cfg, 6, 4);
    const BandPredicate any = [](const GridState&, Cell) { return true; };
    Rng a(7), b(7);
    CHECK(band_sensitivity(enc, world, layouts, any, a) == band_sensitivity(enc, world, layouts, any, b));
  }
  SUBCASE("report is well formed") {
    const auto rep = near_far_sensitivity(enc, cfg, 8, 3, 6, 1);
    CHECK_FALSE(rep.near_distances.empty());
    CHECK_FALSE(rep.far_distances.empty());
    CHECK(rep.near_median == doctest::Approx(median(rep.near_distances)));
    CHECK(rep.far_iqr >= 0.0);
  }
  SUBCASE("placements respect the band") {
    GridWorld world(cfg);
    const auto s = world.reset(3).state;
    const BandPredicate near = [](const GridState& st, Cell c) { return chebyshev(c, st.agent) <= 3; };
    for (Cell tl : band_placements(s, cfg, 2, near)) {
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const Cell c{tl.x + dx, tl.y + dy};
          CHECK(chebyshev(c, s.agent) <= 3);
          CHECK_FALSE(s.occupied(c));
          CHECK_FALSE(c == s.agent);
        }
      }
    }
  }
}

TEST_CASE("nearest pairs") {
  GridConfig cfg;
  auto ds = collect_random(cfg, 200, 5);
  Rng rng(3);
  nn::Encoder<float> enc(spec_for(15), rng);

  SUBCASE("a duplicated observation ranks first") {
    ds.transitions.push_back(ds.transitions[17]);
    const auto pairs = nearest_pairs(enc, ds, 5, 1000000, 0);
    CHECK(pairs.front().distance == 0.0);
    for (std::size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i - 1].distance <= pairs[i].distance);
  }
  SUBCASE("exhaustive scan matches brute force; sampled scan reports true distances") {
    std::vector<const Observation*> obs;
    for (const auto& t : ds.transitions) obs.push_back(&t.obs);
    const auto z = embed_all(enc, obs);
    const auto sampled = nearest_pairs(z, 10, 5000, 11);
    for (const auto& p : sampled) {
      CHECK(p.i < p.j);
      CHECK(p.distance == doctest::Approx(double((z.col(Eigen::Index(p.i)) - z.col(Eigen::Index(p.j))).cwiseAbs().sum())).epsilon(1e-5));
    }
    const auto full = nearest_pairs(z, 10, 1000000, 0);
    std::vector<double> brute;
    for (Eigen::Index i = 0; i < z.cols(); ++i)
      for (Eigen::Index j = i + 1; j < z.cols(); ++j) brute.push_back(double((z.col(i) - z.col(j)).cwiseAbs().sum()));
    std::sort(brute.begin(), brute.end());
    for (std::size_t k = 0; k < full.size(); ++k) CHECK(full[k].distance == doctest::Approx(brute[k]).epsilon(1e-5));
    CHECK(sampled.back().distance >= full.back().distance - 1e-6);
  }
  SUBCASE("k beyond the budget is rejected") {
    CHECK_THROWS_AS(nearest_pairs(enc, ds, 10, 5, 0), ConfigError);
  }
}

TEST_CASE("c sweep with a single value gives one row") {
  GridConfig cfg;
  cfg.width = cfg.height = 7;
  cfg.n_obstacles = 2;
  cfg.goal = {3, 3};
  const auto ds = collect_random(cfg, 300, 1);
  Rng rng(4);
  nn::Encoder<float> psi(spec_for(7), rng);
  BisimConfig base;
  base.steps = 5;
  base.batch = 8;
  base.forward_hidden = {8};
  const auto rows = c_sweep(ds, psi, {0.5}, base, 0, 2);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].c == 0.5);
  CHECK(std::isfinite(rows[0].response_radius));
  CHECK_THROWS_AS(c_sweep(ds, psi, {}, base, 0, 2), ConfigError);
}

TEST_CASE("Spearman correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3, 4}, {1, 1, 1, 1}) == 0.0);
  CHECK(spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8));
  CHECK_THROWS_AS(spearman({1}, {1}), ConfigError);
}

TEST_CASE("corridor locality on a constant encoder is degenerate but finite") {
  GridConfig cfg;
  cfg.layout = Layout::corridor;
  GridWorld world(cfg);
  const auto layouts = sample_layouts(cfg, 2, 0);
  const auto r = corridor_locality(constant_encoder(15), world, layouts);
  CHECK(r.interior_mean == 0.0);
  CHECK(r.exterior_mean == 0.0);
}

TEST_CASE("maps are written as CSV and PNG") {
  GridConfig cfg;
  GridWorld world(cfg);
  Rng rng(5);
  nn::Encoder<float> enc(spec_for(15), rng);
  const auto map = perturbation_map(enc, world, world.reset(0).state);
  const auto dir = std::filesystem::temp_directory_path() / "abisim_test_maps";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_map(map, dir, "m");
  CHECK(std::filesystem::file_size(dir / "m.csv") > 0);
  CHECK(std::filesystem::file_size(dir / "m.png") > 0);
  std::filesystem::remove_all(dir);
}
