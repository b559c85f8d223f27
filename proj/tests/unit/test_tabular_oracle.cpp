#include "doctest.h"

#include <numeric>

#include "abisim/tabular_oracle.hpp"
#include "support/oracles.hpp"

using namespace abisim;
using namespace abisim::oracle;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

FiniteMDP self_loop_mdp() {
  FiniteMDP m;
  m.n_states = 2;
  m.n_actions = 2;
  m.P = {MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
  return m;
}

MetricTable unit_metric(int n) { return MatrixXd::Ones(n, n) - MatrixXd::Identity(n, n); }

/// Random distribution with masses on a 0.05 grid, supported on `support` of `n` states.
VectorXd grid_distribution(int n, int support, Rng& rng) {
  VectorXd p = VectorXd::Zero(n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  int left = 20;
  for (int k = 0; k < support - 1; ++k) {
    const int take = 1 + int(rng() % std::uint64_t(left - (support - 1 - k)));
    p(idx[std::size_t(k)]) = take / 20.0;
    left -= take;
  }
  p(idx[std::size_t(support - 1)]) = left / 20.0;
  return p;
}

}  // namespace

TEST_CASE("W1 basics") {
  Rng rng(1);
  const MetricTable d = random_pseudometric(4, rng);
  const VectorXd p = VectorXd::Constant(4, 0.25);
  CHECK(exact_w1(p, p, d) == 0.0);
  for (int x = 0; x < 4; ++x) {
    for (int y = 0; y < 4; ++y) {
      CHECK(exact_w1(VectorXd::Unit(4, x), VectorXd::Unit(4, y), d) == doctest::Approx(d(x, y)).epsilon(1e-12));
    }
  }
}

TEST_CASE("W1 matches a brute-force scan of the transport polytope") {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    const MetricTable d = random_pseudometric(4, rng);
    const VectorXd p = grid_distribution(4, 3, rng), q = grid_distribution(4, 3, rng);
    // Restrict to the supports so the enumeration stays small.
    std::vector<int> sp, sq;
    for (int i = 0; i < 4; ++i) {
      if (p(i) > 0) sp.push_back(i);
      if (q(i) > 0) sq.push_back(i);
    }
    VectorXd pr(Eigen::Index(sp.size())), qr(Eigen::Index(sq.size()));
    MatrixXd dr(Eigen::Index(sp.size()), Eigen::Index(sq.size()));
    for (std::size_t i = 0; i < sp.size(); ++i) {
      pr(Eigen::Index(i)) = p(sp[i]);
      for (std::size_t j = 0; j < sq.size(); ++j) dr(Eigen::Index(i), Eigen::Index(j)) = d(sp[i], sq[j]);
    }
    for (std::size_t j = 0; j < sq.size(); ++j) qr(Eigen::Index(j)) = q(sq[j]);
    const double brute = oracle_ref::brute_force_transport(pr, qr, dr, 0.05);
    CHECK(exact_w1(p, q, d) == doctest::Approx(brute).epsilon(1e-9));
  }
}

TEST_CASE("transport solution certifies itself") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + int(rng() % 7);
    const MetricTable d = random_pseudometric(n, rng);
    VectorXd p = VectorXd::NullaryExpr(n, [&] { return double(rng() % 100 + 1); });
    VectorXd q = VectorXd::NullaryExpr(n, [&] { return double(rng() % 100 + 1); });
    p /= p.sum();
    q /= q.sum();
    const auto sol = solve_transport(p, q, d);
    CHECK(sol.cost == doctest::Approx(sol.dual).epsilon(1e-9));
    CHECK((sol.plan.rowwise().sum() - p).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((sol.plan.colwise().sum().transpose() - q).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(sol.plan.minCoeff() >= -1e-15);
  }
}

TEST_CASE("operator F on small MDPs") {
  SUBCASE("self-loop example") {
    const auto F = apply_F(self_loop_mdp(), unit_metric(2), MatrixXd::Zero(2, 2), 0.5, BaseWeight::one_minus_c);
    CHECK(F(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("monotone in the metric argument") {
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
      const int n = 2 + int(rng() % 6);
      const auto mdp = random_mdp(n, 1 + int(rng() % 3), rng);
      const auto d_ss = random_pseudometric(n, rng);
      const MetricTable d1 = random_pseudometric(n, rng);
      const MetricTable d2 = d1 + random_pseudometric(n, rng);
      const auto f1 = apply_F(mdp, d_ss, d1, 0.9, BaseWeight::one);
      const auto f2 = apply_F(mdp, d_ss, d2, 0.9, BaseWeight::one);
      CHECK((f2 - f1).minCoeff() >= -1e-12);
    }
  }
  SUBCASE("two applications on a deterministic chain unroll by hand") {
    const auto mdp = chain_mdp(3);
    const MetricTable d_ss = unit_metric(3);
    const double c = 0.5;
    const auto F2 = apply_F(mdp, d_ss, apply_F(mdp, d_ss, MatrixXd::Zero(3, 3), c, BaseWeight::one), c, BaseWeight::one);
    // F(0) = d_ss. Second pass, with actions {left, right} weighted 1/2:
    //  (0,1): left -> (0,0), right -> (1,2): 1 + 0.5 * (0 + 1) / 2 = 1.25
    //  (0,2): left -> (0,1), right -> (1,2): 1 + 0.5 * (1 + 1) / 2 = 1.5
    //  (1,2): left -> (0,1), right -> (2,2): 1 + 0.5 * (1 + 0) / 2 = 1.25
    CHECK(F2(0, 1) == doctest::Approx(1.25).epsilon(1e-15));
    CHECK(F2(0, 2) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(F2(1, 2) == doctest::Approx(1.25).epsilon(1e-15));
  }
}

TEST_CASE("fixed point") {
  SUBCASE("linear algebra on the self-loop example") {
    const auto r = solve_fixed_point(self_loop_mdp(), unit_metric(2), 0.5, BaseWeight::one_minus_c, 1e-13);
    CHECK(r.d(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("error decays at least geometrically") {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
      const int n = 2 + int(rng() % 6);
      const auto mdp = random_mdp(n, 2, rng);
      const auto d_ss = random_pseudometric(n, rng);
      const double c = 0.8;
      const auto star = solve_fixed_point(mdp, d_ss, c, BaseWeight::one, 1e-13).d;
      MetricTable d = MatrixXd::Zero(n, n);
      const double e0 = sup_norm(d, star);
      double ck = 1.0;
      for (int k = 1; k <= 15; ++k) {
        d = apply_F(mdp, d_ss, d, c, BaseWeight::one);
        ck *= c;
        CHECK(sup_norm(d, star) <= ck * e0 + 1e-10);
      }
    }
  }
  SUBCASE("two initializations agree") {
    Rng rng(6);
    for (int t = 0; t < 10; ++t) {
      const int n = 2 + int(rng() % 6);
      const auto mdp = random_mdp(n, 3, rng);
      const auto d_ss = random_pseudometric(n, rng);
      const auto a = solve_fixed_point(mdp, d_ss, 0.9, BaseWeight::one_minus_c, 1e-10);
      const MetricTable far = 50.0 * unit_metric(n);
      const auto b = solve_fixed_point(mdp, d_ss, 0.9, BaseWeight::one_minus_c, 1e-10, far);
      CHECK(sup_norm(a.d, b.d) <= 1e-6);
    }
  }
  SUBCASE("iteration cap surfaces as a numerical error") {
    Rng rng(7);
    const auto mdp = random_mdp(5, 2, rng, 0.0);
    CHECK_THROWS_AS(solve_fixed_point(mdp, random_pseudometric(5, rng), 0.999, BaseWeight::one, 1e-15,
                                      std::nullopt, 3),
                    NumericalError);
  }
}

TEST_CASE("contraction") {
  Rng rng(8);
  const auto mdp = random_mdp(4, 2, rng);
  const auto d_ss = random_pseudometric(4, rng);
  const auto d = random_pseudometric(4, rng);
  const auto same = check_contraction(mdp, d_ss, d, d, 0.9, BaseWeight::one);
  CHECK(same.lhs == 0.0);
  CHECK(same.holds);
  for (double c : {0.5, 0.999}) {
    for (int t = 0; t < 30; ++t) {
      const int n = 2 + int(rng() % 9);
      const auto m = random_mdp(n, 1 + int(rng() % 4), rng);
      CHECK(check_contraction(m, random_pseudometric(n, rng), random_pseudometric(n, rng, 4.0),
                              random_pseudometric(n, rng, 4.0), c, BaseWeight::one_minus_c)
                .holds);
    }
  }
}

TEST_CASE("factored invariance") {
  const auto rep = factored_invariance_check(4, 3, 0.9);
  CHECK(rep.max_uncontrollable_distance <= 1e-8);
  CHECK(rep.max_controllable_error <= 1e-6);
  CHECK(rep.invariant);

  SUBCASE("a single noise state reproduces the plain chain") {
    const auto r1 = factored_invariance_check(4, 1, 0.9);
    MetricTable position(4, 4);
    for (int x = 0; x < 4; ++x)
      for (int y = 0; y < 4; ++y) position(x, y) = std::abs(x - y);
    const auto chain = solve_fixed_point(chain_mdp(4), position, 0.9, BaseWeight::one_minus_c, 1e-10);
    CHECK(sup_norm(r1.d_star, chain.d) <= 1e-8);
  }
  SUBCASE("factorization is validated") {
    auto m = factored_chain_mdp(3, 2, 0);
    CHECK_NOTHROW(check_factorization(m));
    // Couple the noise factor to the action: no longer factored.
    m.P[0].row(0).setZero();
    m.P[0](0, 1) = 1.0;
    m.P[1].row(0).setZero();
    m.P[1](0, 0) = 1.0;
    CHECK_THROWS_AS(check_factorization(m), ConfigError);
  }
}

TEST_CASE("validation and serialization") {
  MetricTable bad = unit_metric(3);
  bad(0, 1) = 2.0;
  CHECK_THROWS_AS(validate_metric(bad), ConfigError);
  FiniteMDP m = self_loop_mdp();
  m.P[1](0, 0) = 0.5;
  CHECK_THROWS_AS(m.validate(), ConfigError);

  Rng rng(9);
  const auto mdp = random_mdp(4, 2, rng);
  const auto back = mdp_from_json(to_json(mdp));
  CHECK(back.n_states == 4);
  for (int a = 0; a < 2; ++a) CHECK(back.P[std::size_t(a)] == mdp.P[std::size_t(a)]);
  const auto d = random_pseudometric(4, rng);
  CHECK(metric_from_json(metric_to_json(d)) == d);
}
