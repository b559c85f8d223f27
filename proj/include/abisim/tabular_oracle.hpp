#pragma once

#include <Eigen/Core>
#include "json.hpp"

#include <optional>
#include <utility>
#include <vector>

#include "abisim/common.hpp"

namespace abisim::oracle {

/// Finite MDP with transition matrices P[a](s, s'). Rewards are not needed by the metric.
struct FiniteMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<Eigen::MatrixXd> P;
  /// Optional (controllable, uncontrollable) coordinates per state.
  std::vector<std::pair<int, int>> labels;

  /// Throws ConfigError unless every row of every P[a] is a distribution (within 1e-12).
  void validate() const;
  Eigen::VectorXd row(int s, int a) const { return P[std::size_t(a)].row(s).transpose(); }
};

using MetricTable = Eigen::MatrixXd;

enum class BaseWeight { one, one_minus_c };

/// Checks symmetry, zero diagonal and nonnegativity; throws ConfigError otherwise.
void validate_metric(const MetricTable& d, double tol = 1e-12);

/// Exact 1-Wasserstein distance between distributions p and q under ground metric d, solved as
/// a min-cost transport problem by successive shortest paths. The optimal dual is reconstructed
/// and the duality gap checked against 1e-9.
double exact_w1(const Eigen::VectorXd& p, const Eigen::VectorXd& q, const MetricTable& d);

struct TransportSolution {
  double cost = 0.0;
  double dual = 0.0;
  Eigen::MatrixXd plan;
};
TransportSolution solve_transport(const Eigen::VectorXd& p, const Eigen::VectorXd& q,
                                  const MetricTable& d);

/// F(d)(i, j) = w d_ss(i, j) + c sum_a weight_a W1(P[i][a], P[j][a]; d), with w = 1 or 1 - c.
/// Action weights default to uniform.
MetricTable apply_F(const FiniteMDP& mdp, const MetricTable& d_ss, const MetricTable& d, double c,
                    BaseWeight base_weight, const std::vector<double>& action_weights = {});

struct FixedPointResult {
  MetricTable d;
  int iterations = 0;
  double last_change = 0.0;
};

/// Iterates F from d0 (zeros when empty) until the sup-norm change drops below tol.
/// Throws NumericalError after max_iterations.
FixedPointResult solve_fixed_point(const FiniteMDP& mdp, const MetricTable& d_ss, double c,
                                   BaseWeight base_weight, double tol,
                                   std::optional<MetricTable> d0 = std::nullopt,
                                   int max_iterations = 100000,
                                   const std::vector<double>& action_weights = {});

struct ContractionCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// lhs = sup |F(d1) - F(d2)|, rhs = c sup |d1 - d2|; holds iff lhs <= rhs + 1e-9.
ContractionCheck check_contraction(const FiniteMDP& mdp, const MetricTable& d_ss,
                                   const MetricTable& d1, const MetricTable& d2, double c,
                                   BaseWeight base_weight);

/// Controllable chain of `length` cells with actions {left, right} (clamped at the ends).
FiniteMDP chain_mdp(int length);

/// Product of a controllable chain with an autonomous stochastic factor of `noise_states`
/// values, whose transition matrix is drawn from `seed`. State (x, u) has index x * U + u.
FiniteMDP factored_chain_mdp(int chain_len, int noise_states, std::uint64_t seed);

/// Throws ConfigError unless the labelled MDP factorizes: the uncontrollable factor evolves
/// independently of the action and of the controllable coordinate, and the controllable
/// factor independently of the uncontrollable one.
void check_factorization(const FiniteMDP& mdp);

struct InvarianceReport {
  int chain_len = 0;
  int noise_states = 0;
  double c = 0.0;
  double max_uncontrollable_distance = 0.0;
  double max_controllable_error = 0.0;
  int iterations = 0;
  bool invariant = false;
  bool matches_marginal = false;
  MetricTable d_star;
  MetricTable d_marginal;
};

InvarianceReport factored_invariance_check(int chain_len, int noise_states, double c,
                                           BaseWeight base_weight = BaseWeight::one_minus_c,
                                           double tol = 1e-10, std::uint64_t seed = 0);

/// Bayes-optimal accuracy of predicting a_t from (s_t, s_{t+k}) when actions are uniform and
/// s_t ~ `initial` (uniform when empty), by exact enumeration.
double kstep_bayes_accuracy(const FiniteMDP& mdp, int k, const Eigen::VectorXd& initial = {});

/// Random MDP with n states and the given number of actions; each (s, a) row is a point mass
/// with probability `deterministic_fraction`, otherwise a random distribution over a few states.
FiniteMDP random_mdp(int n_states, int n_actions, Rng& rng, double deterministic_fraction = 0.5);

/// Random pseudometric: L1 distances between random points, with random ties (distance 0).
MetricTable random_pseudometric(int n, Rng& rng, double scale = 1.0);

double sup_norm(const MetricTable& a, const MetricTable& b);

nlohmann::json to_json(const FiniteMDP& mdp);
FiniteMDP mdp_from_json(const nlohmann::json& j);
nlohmann::json metric_to_json(const MetricTable& d);
MetricTable metric_from_json(const nlohmann::json& j);

std::string to_string(BaseWeight w);

}  // namespace abisim::oracle
