#include "abisim/tabular_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace abisim::oracle {

namespace {

constexpr double kMassEps = 1e-15;
constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd normalized(const Eigen::VectorXd& p, const char* name) {
  if ((p.array() < -1e-12).any() || !p.allFinite()) {
    throw ConfigError(std::string("W1: distribution ") + name + " has negative or non-finite mass");
  }
  const double total = p.sum();
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError(std::string("W1: distribution ") + name + " is not normalized (sums to " +
                      std::to_string(total) + ")");
  }
  return p.cwiseMax(0.0) / p.cwiseMax(0.0).sum();
}

/// Residual network for successive shortest paths.
struct FlowGraph {
  struct Edge {
    int to;
    int rev;
    double cap;
    double cost;
  };
  std::vector<std::vector<Edge>> adj;

  explicit FlowGraph(int n) : adj(std::size_t(n)) {}

  void add(int from, int to, double cap, double cost) {
    adj[std::size_t(from)].push_back({to, int(adj[std::size_t(to)].size()), cap, cost});
    adj[std::size_t(to)].push_back({from, int(adj[std::size_t(from)].size()) - 1, 0.0, -cost});
  }

  /// Bellman-Ford distances over residual arcs. `all_sources` starts every node at 0.
  std::vector<double> distances(int source, bool all_sources, std::vector<std::pair<int, int>>* parent) const {
    const std::size_t n = adj.size();
    std::vector<double> dist(n, all_sources ? 0.0 : kInf);
    if (!all_sources) dist[std::size_t(source)] = 0.0;
    if (parent) parent->assign(n, {-1, -1});
    for (std::size_t round = 0; round < n; ++round) {
      bool changed = false;
      for (std::size_t u = 0; u < n; ++u) {
        if (dist[u] == kInf) continue;
        for (std::size_t e = 0; e < adj[u].size(); ++e) {
          const Edge& edge = adj[u][e];
          if (edge.cap <= kMassEps) continue;
          const double nd = dist[u] + edge.cost;
          if (nd < dist[std::size_t(edge.to)] - 1e-14) {
            dist[std::size_t(edge.to)] = nd;
            if (parent) (*parent)[std::size_t(edge.to)] = {int(u), int(e)};
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    return dist;
  }
};

}  // namespace

void FiniteMDP::validate() const {
  if (n_states < 1 || n_actions < 1) throw ConfigError("MDP needs at least one state and action");
  if (int(P.size()) != n_actions) throw ConfigError("MDP: one transition matrix per action required");
  for (int a = 0; a < n_actions; ++a) {
    const auto& m = P[std::size_t(a)];
    if (m.rows() != n_states || m.cols() != n_states) {
      throw ConfigError("MDP: transition matrix " + std::to_string(a) + " has the wrong shape");
    }
    if ((m.array() < 0.0).any()) throw ConfigError("MDP: negative transition probability");
    for (int s = 0; s < n_states; ++s) {
      if (std::abs(m.row(s).sum() - 1.0) > 1e-12) {
        throw ConfigError("MDP: row (s=" + std::to_string(s) + ", a=" + std::to_string(a) +
                          ") is not stochastic");
      }
    }
  }
  if (!labels.empty() && int(labels.size()) != n_states) {
    throw ConfigError("MDP: labels must cover every state");
  }
}

void validate_metric(const MetricTable& d, double tol) {
  if (d.rows() != d.cols()) throw ConfigError("metric table must be square");
  if (!d.allFinite()) throw ConfigError("metric table has non-finite entries");
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    if (std::abs(d(i, i)) > tol) throw ConfigError("metric table has a nonzero diagonal");
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
      if (d(i, j) < -tol) throw ConfigError("metric table has a negative entry");
      if (std::abs(d(i, j) - d(j, i)) > tol) throw ConfigError("metric table is not symmetric");
    }
  }
}

TransportSolution solve_transport(const Eigen::VectorXd& p_in, const Eigen::VectorXd& q_in,
                                  const MetricTable& d) {
  if (p_in.size() != q_in.size() || d.rows() != p_in.size() || d.cols() != p_in.size()) {
    throw ShapeError("W1: distributions and metric table disagree in size");
  }
  const Eigen::VectorXd p = normalized(p_in, "p"), q = normalized(q_in, "q");
  const Eigen::Index n = p.size();
  std::vector<int> sup, dem;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (p(i) > kMassEps) sup.push_back(int(i));
    if (q(i) > kMassEps) dem.push_back(int(i));
  }
  const int m = int(sup.size()), k = int(dem.size());
  const int source = 0, sink = m + k + 1;
  FlowGraph g(m + k + 2);
  for (int i = 0; i < m; ++i) g.add(source, 1 + i, p(sup[std::size_t(i)]), 0.0);
  for (int j = 0; j < k; ++j) g.add(1 + m + j, sink, q(dem[std::size_t(j)]), 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) g.add(1 + i, 1 + m + j, kInf, d(sup[std::size_t(i)], dem[std::size_t(j)]));
  }

  double routed = 0.0;
  std::vector<std::pair<int, int>> parent;
  while (routed < 1.0 - 1e-13) {
    const auto dist = g.distances(source, false, &parent);
    if (dist[std::size_t(sink)] == kInf) break;
    double push = kInf;
    for (int v = sink; v != source;) {
      const auto [u, e] = parent[std::size_t(v)];
      push = std::min(push, g.adj[std::size_t(u)][std::size_t(e)].cap);
      v = u;
    }
    for (int v = sink; v != source;) {
      const auto [u, e] = parent[std::size_t(v)];
      auto& edge = g.adj[std::size_t(u)][std::size_t(e)];
      edge.cap -= push;
      g.adj[std::size_t(v)][std::size_t(edge.rev)].cap += push;
      v = u;
    }
    routed += push;
  }

  TransportSolution sol;
  sol.plan = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < m; ++i) {
    for (const auto& edge : g.adj[std::size_t(1 + i)]) {
      if (edge.to > m && edge.to < sink) {
        const double flow = g.adj[std::size_t(edge.to)][std::size_t(edge.rev)].cap;
        const int a = sup[std::size_t(i)], b = dem[std::size_t(edge.to - m - 1)];
        sol.plan(a, b) += flow;
        sol.cost += flow * d(a, b);
      }
    }
  }

  // Dual from node potentials of the optimal residual network.
  const auto pi = g.distances(source, true, nullptr);
  for (int i = 0; i < m; ++i) sol.dual -= p(sup[std::size_t(i)]) * pi[std::size_t(1 + i)];
  for (int j = 0; j < k; ++j) sol.dual += q(dem[std::size_t(j)]) * pi[std::size_t(1 + m + j)];
  const double scale = std::max(1.0, d.cwiseAbs().maxCoeff());
  if (std::abs(routed - 1.0) > 1e-9 || std::abs(sol.cost - sol.dual) > 1e-9 * scale) {
    throw NumericalError("W1 transport solve did not certify optimality (gap " +
                         std::to_string(sol.cost - sol.dual) + ")");
  }
  return sol;
}

double exact_w1(const Eigen::VectorXd& p, const Eigen::VectorXd& q, const MetricTable& d) {
  // Point masses need no transport solve.
  Eigen::Index ip, iq;
  if (p.size() == q.size() && p.maxCoeff(&ip) == 1.0 && q.maxCoeff(&iq) == 1.0 &&
      std::abs(p.sum() - 1.0) < 1e-15 && std::abs(q.sum() - 1.0) < 1e-15 &&
      (p.array() >= 0.0).all() && (q.array() >= 0.0).all()) {
    if (d.rows() != p.size()) throw ShapeError("W1: distributions and metric table disagree in size");
    return d(ip, iq);
  }
  return solve_transport(p, q, d).cost;
}

namespace {

std::vector<double> resolve_weights(const FiniteMDP& mdp, const std::vector<double>& weights) {
  if (weights.empty()) return std::vector<double>(std::size_t(mdp.n_actions), 1.0 / mdp.n_actions);
  if (int(weights.size()) != mdp.n_actions) throw ConfigError("one action weight per action required");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("action weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("action weights must sum to 1");
  return weights;
}

}  // namespace

MetricTable apply_F(const FiniteMDP& mdp, const MetricTable& d_ss, const MetricTable& d, double c,
                    BaseWeight base_weight, const std::vector<double>& action_weights) {
  const auto weights = resolve_weights(mdp, action_weights);
  const double w = base_weight == BaseWeight::one ? 1.0 : 1.0 - c;
  const int n = mdp.n_states;
  MetricTable out = MetricTable::Zero(n, n);
  std::vector<Eigen::VectorXd> rows;
  rows.reserve(std::size_t(n) * std::size_t(mdp.n_actions));
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < mdp.n_actions; ++a) rows.push_back(mdp.row(s, a));
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double expected = 0.0;
      for (int a = 0; a < mdp.n_actions; ++a) {
        if (weights[std::size_t(a)] == 0.0) continue;
        expected += weights[std::size_t(a)] *
                    exact_w1(rows[std::size_t(i * mdp.n_actions + a)],
                             rows[std::size_t(j * mdp.n_actions + a)], d);
      }
      out(i, j) = out(j, i) = w * d_ss(i, j) + c * expected;
    }
  }
  return out;
}

double sup_norm(const MetricTable& a, const MetricTable& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

FixedPointResult solve_fixed_point(const FiniteMDP& mdp, const MetricTable& d_ss, double c,
                                   BaseWeight base_weight, double tol,
                                   std::optional<MetricTable> d0, int max_iterations,
                                   const std::vector<double>& action_weights) {
  if (!(c > 0.0 && c < 1.0)) throw ConfigError("fixed point requires 0 < c < 1");
  FixedPointResult r;
  r.d = d0 ? *d0 : MetricTable::Zero(mdp.n_states, mdp.n_states);
  for (int it = 1; it <= max_iterations; ++it) {
    MetricTable next = apply_F(mdp, d_ss, r.d, c, base_weight, action_weights);
    r.last_change = sup_norm(next, r.d);
    r.d = std::move(next);
    r.iterations = it;
    if (r.last_change < tol) return r;
  }
  throw NumericalError("fixed-point iteration did not converge within " +
                       std::to_string(max_iterations) + " iterations");
}

ContractionCheck check_contraction(const FiniteMDP& mdp, const MetricTable& d_ss,
                                   const MetricTable& d1, const MetricTable& d2, double c,
                                   BaseWeight base_weight) {
  ContractionCheck r;
  r.lhs = sup_norm(apply_F(mdp, d_ss, d1, c, base_weight), apply_F(mdp, d_ss, d2, c, base_weight));
  r.rhs = c * sup_norm(d1, d2);
  r.holds = r.lhs <= r.rhs + 1e-9;
  return r;
}

FiniteMDP chain_mdp(int length) {
  if (length < 1) throw ConfigError("chain length must be >= 1");
  FiniteMDP mdp;
  mdp.n_states = length;
  mdp.n_actions = 2;
  mdp.P.assign(2, Eigen::MatrixXd::Zero(length, length));
  for (int x = 0; x < length; ++x) {
    mdp.P[0](x, std::max(x - 1, 0)) = 1.0;
    mdp.P[1](x, std::min(x + 1, length - 1)) = 1.0;
  }
  return mdp;
}

FiniteMDP factored_chain_mdp(int chain_len, int noise_states, std::uint64_t seed) {
  if (noise_states < 1) throw ConfigError("noise_states must be >= 1");
  const FiniteMDP chain = chain_mdp(chain_len);
  Rng rng = make_rng(seed, 31);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  Eigen::MatrixXd noise(noise_states, noise_states);
  for (int u = 0; u < noise_states; ++u) {
    for (int v = 0; v < noise_states; ++v) noise(u, v) = unif(rng);
    noise.row(u) /= noise.row(u).sum();
  }
  FiniteMDP mdp;
  mdp.n_states = chain_len * noise_states;
  mdp.n_actions = chain.n_actions;
  for (int a = 0; a < chain.n_actions; ++a) {
    Eigen::MatrixXd P(mdp.n_states, mdp.n_states);
    for (int x = 0; x < chain_len; ++x) {
      for (int u = 0; u < noise_states; ++u) {
        for (int x2 = 0; x2 < chain_len; ++x2) {
          for (int u2 = 0; u2 < noise_states; ++u2) {
            P(x * noise_states + u, x2 * noise_states + u2) = chain.P[std::size_t(a)](x, x2) * noise(u, u2);
          }
        }
      }
    }
    // Exact renormalization keeps rows stochastic to machine precision.
    for (int s = 0; s < mdp.n_states; ++s) P.row(s) /= P.row(s).sum();
    mdp.P.push_back(P);
  }
  for (int x = 0; x < chain_len; ++x) {
    for (int u = 0; u < noise_states; ++u) mdp.labels.emplace_back(x, u);
  }
  return mdp;
}

void check_factorization(const FiniteMDP& mdp) {
  mdp.validate();
  if (mdp.labels.empty()) throw ConfigError("factorization check needs state labels");
  int X = 0, U = 0;
  std::map<std::pair<int, int>, int> index;
  for (int s = 0; s < mdp.n_states; ++s) {
    const auto lab = mdp.labels[std::size_t(s)];
    X = std::max(X, lab.first + 1);
    U = std::max(U, lab.second + 1);
    if (!index.emplace(lab, s).second) throw ConfigError("duplicate state label");
  }
  if (X * U != mdp.n_states) throw ConfigError("labels do not form a product space");
  constexpr double kTol = 1e-12;
  // Reference uncontrollable kernel from controllable coordinate 0 under action 0.
  Eigen::MatrixXd noise = Eigen::MatrixXd::Zero(U, U);
  for (int u = 0; u < U; ++u) {
    const int s = index.at({0, u});
    for (int s2 = 0; s2 < mdp.n_states; ++s2) noise(u, mdp.labels[std::size_t(s2)].second) += mdp.P[0](s, s2);
  }
  for (int a = 0; a < mdp.n_actions; ++a) {
    for (int x = 0; x < X; ++x) {
      Eigen::VectorXd ctrl = Eigen::VectorXd::Zero(X);
      const int s0 = index.at({x, 0});
      for (int s2 = 0; s2 < mdp.n_states; ++s2) ctrl(mdp.labels[std::size_t(s2)].first) += mdp.P[std::size_t(a)](s0, s2);
      for (int u = 0; u < U; ++u) {
        const int s = index.at({x, u});
        for (int s2 = 0; s2 < mdp.n_states; ++s2) {
          const auto [x2, u2] = mdp.labels[std::size_t(s2)];
          if (std::abs(mdp.P[std::size_t(a)](s, s2) - ctrl(x2) * noise(u, u2)) > kTol) {
            throw ConfigError("factorization violated at state (" + std::to_string(x) + ", " +
                              std::to_string(u) + "), action " + std::to_string(a));
          }
        }
      }
    }
  }
}

InvarianceReport factored_invariance_check(int chain_len, int noise_states, double c,
                                           BaseWeight base_weight, double tol, std::uint64_t seed) {
  const FiniteMDP mdp = factored_chain_mdp(chain_len, noise_states, seed);
  check_factorization(mdp);
  InvarianceReport rep;
  rep.chain_len = chain_len;
  rep.noise_states = noise_states;
  rep.c = c;

  MetricTable d_ss(mdp.n_states, mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) {
    for (int t = 0; t < mdp.n_states; ++t) {
      d_ss(s, t) = std::abs(mdp.labels[std::size_t(s)].first - mdp.labels[std::size_t(t)].first);
    }
  }
  const auto full = solve_fixed_point(mdp, d_ss, c, base_weight, tol);
  rep.d_star = full.d;
  rep.iterations = full.iterations;

  const FiniteMDP chain = chain_mdp(chain_len);
  MetricTable chain_ss(chain_len, chain_len);
  for (int x = 0; x < chain_len; ++x) {
    for (int y = 0; y < chain_len; ++y) chain_ss(x, y) = std::abs(x - y);
  }
  rep.d_marginal = solve_fixed_point(chain, chain_ss, c, base_weight, tol).d;

  for (int s = 0; s < mdp.n_states; ++s) {
    for (int t = 0; t < mdp.n_states; ++t) {
      const auto [x1, u1] = mdp.labels[std::size_t(s)];
      const auto [x2, u2] = mdp.labels[std::size_t(t)];
      if (x1 == x2) rep.max_uncontrollable_distance = std::max(rep.max_uncontrollable_distance, rep.d_star(s, t));
      if (u1 == u2) {
        rep.max_controllable_error =
            std::max(rep.max_controllable_error, std::abs(rep.d_star(s, t) - rep.d_marginal(x1, x2)));
      }
    }
  }
  rep.invariant = rep.max_uncontrollable_distance <= 1e-8;
  rep.matches_marginal = rep.max_controllable_error <= 1e-6;
  return rep;
}

double kstep_bayes_accuracy(const FiniteMDP& mdp, int k, const Eigen::VectorXd& initial) {
  mdp.validate();
  if (k < 1) throw ConfigError("k must be >= 1");
  const int n = mdp.n_states, A = mdp.n_actions;
  const Eigen::VectorXd mu =
      initial.size() == 0 ? Eigen::VectorXd::Constant(n, 1.0 / n) : initial;
  Eigen::MatrixXd uniform = Eigen::MatrixXd::Zero(n, n);
  for (const auto& P : mdp.P) uniform += P / double(A);
  Eigen::MatrixXd tail = Eigen::MatrixXd::Identity(n, n);
  for (int i = 1; i < k; ++i) tail = tail * uniform;
  double acc = 0.0;
  for (int s = 0; s < n; ++s) {
    Eigen::MatrixXd joint(A, n);
    for (int a = 0; a < A; ++a) joint.row(a) = mdp.P[std::size_t(a)].row(s) * tail;
    acc += mu(s) / double(A) * joint.colwise().maxCoeff().sum();
  }
  return acc;
}

FiniteMDP random_mdp(int n_states, int n_actions, Rng& rng, double deterministic_fraction) {
  FiniteMDP mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  std::uniform_int_distribution<int> pick(0, n_states - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int a = 0; a < n_actions; ++a) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n_states, n_states);
    for (int s = 0; s < n_states; ++s) {
      if (unif(rng) < deterministic_fraction || n_states == 1) {
        P(s, pick(rng)) = 1.0;
        continue;
      }
      const int support = std::uniform_int_distribution<int>(2, std::min(4, n_states))(rng);
      for (int i = 0; i < support; ++i) P(s, pick(rng)) += 0.05 + unif(rng);
      P.row(s) /= P.row(s).sum();
    }
    mdp.P.push_back(P);
  }
  return mdp;
}

MetricTable random_pseudometric(int n, Rng& rng, double scale) {
  std::uniform_real_distribution<double> unif(0.0, scale);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Eigen::MatrixXd pts(n, 2);
  for (int i = 0; i < n; ++i) {
    if (i > 0 && coin(rng) < 0.2) {
      pts.row(i) = pts.row(std::uniform_int_distribution<int>(0, i - 1)(rng));
    } else {
      pts(i, 0) = unif(rng);
      pts(i, 1) = unif(rng);
    }
  }
  MetricTable d(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) d(i, j) = (pts.row(i) - pts.row(j)).cwiseAbs().sum();
  }
  return d;
}

std::string to_string(BaseWeight w) { return w == BaseWeight::one ? "one" : "one_minus_c"; }

nlohmann::json metric_to_json(const MetricTable& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    std::vector<double> r(std::size_t(d.cols()));
    for (Eigen::Index j = 0; j < d.cols(); ++j) r[std::size_t(j)] = d(i, j);
    rows.push_back(r);
  }
  return rows;
}

MetricTable metric_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  MetricTable d(Eigen::Index(rows.size()), Eigen::Index(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ConfigError("metric table must be square");
    for (std::size_t k = 0; k < rows.size(); ++k) d(Eigen::Index(i), Eigen::Index(k)) = rows[i][k];
  }
  return d;
}

nlohmann::json to_json(const FiniteMDP& mdp) {
  nlohmann::json P = nlohmann::json::array();
  for (const auto& m : mdp.P) P.push_back(metric_to_json(m));
  nlohmann::json j = {{"n_states", mdp.n_states}, {"n_actions", mdp.n_actions}, {"P", P}};
  if (!mdp.labels.empty()) {
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& [x, u] : mdp.labels) labels.push_back({x, u});
    j["labels"] = labels;
  }
  return j;
}

FiniteMDP mdp_from_json(const nlohmann::json& j) {
  FiniteMDP mdp;
  mdp.n_states = j.at("n_states").get<int>();
  mdp.n_actions = j.at("n_actions").get<int>();
  for (const auto& m : j.at("P")) mdp.P.push_back(metric_from_json(m));
  if (j.contains("labels")) {
    for (const auto& l : j.at("labels")) mdp.labels.emplace_back(l.at(0).get<int>(), l.at(1).get<int>());
  }
  mdp.validate();
  return mdp;
}

}  // namespace abisim::oracle
