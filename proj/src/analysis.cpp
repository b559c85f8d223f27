#include "abisim/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <unordered_set>

#include "abisim/features.hpp"
#include "abisim/io.hpp"
#include "abisim/single_step.hpp"

namespace abisim::analysis {

double PerturbationMap::total() const {
  double s = 0.0;
  for (Eigen::Index i = 0; i < response.size(); ++i) {
    if (!std::isnan(response.data()[i])) s += response.data()[i];
  }
  return s;
}

Eigen::VectorXd embedding_distances(const nn::Encoder<float>& encoder,
                                    const std::vector<Observation>& a,
                                    const std::vector<Observation>& b) {
  if (a.size() != b.size()) throw ShapeError("embedding_distances: unequal batch sizes");
  std::vector<const Observation*> pa, pb;
  for (const auto& o : a) pa.push_back(&o);
  for (const auto& o : b) pb.push_back(&o);
  const auto za = embed_all(encoder, pa), zb = embed_all(encoder, pb);
  return (za - zb).cwiseAbs().colwise().sum().transpose().cast<double>();
}

PerturbationMap perturbation_map(const nn::Encoder<float>& encoder, const GridWorld& world,
                                 const GridState& base, const std::string& tag) {
  const GridConfig& cfg = world.config();
  PerturbationMap map;
  map.base = base;
  map.encoder_tag = tag;
  map.response = Eigen::MatrixXd::Constant(cfg.height, cfg.width, std::numeric_limits<double>::quiet_NaN());
  std::vector<Observation> base_obs, toggled;
  std::vector<Cell> cells;
  const Observation ref = world.render(base);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      const Cell c{x, y};
      if (c == base.agent || c == base.goal) continue;
      toggled.push_back(world.render(toggle_obstacle(base, c)));
      base_obs.push_back(ref);
      cells.push_back(c);
    }
  }
  const Eigen::VectorXd d = embedding_distances(encoder, base_obs, toggled);
  for (std::size_t i = 0; i < cells.size(); ++i) map.response(cells[i].y, cells[i].x) = d(Eigen::Index(i));
  return map;
}

double band_fraction(const PerturbationMap& map, int lo, int hi) {
  double in = 0.0, total = 0.0;
  for (int y = 0; y < map.response.rows(); ++y) {
    for (int x = 0; x < map.response.cols(); ++x) {
      if (map.masked(x, y)) continue;
      const double r = map.response(y, x);
      const int dist = chebyshev({x, y}, map.base.agent);
      total += r;
      if (dist >= lo && dist <= hi) in += r;
    }
  }
  return total > 0.0 ? in / total : 0.0;
}

double response_radius(const PerturbationMap& map) {
  double weighted = 0.0, total = 0.0;
  for (int y = 0; y < map.response.rows(); ++y) {
    for (int x = 0; x < map.response.cols(); ++x) {
      if (map.masked(x, y)) continue;
      weighted += map.response(y, x) * chebyshev({x, y}, map.base.agent);
      total += map.response(y, x);
    }
  }
  return total > 0.0 ? weighted / total : 0.0;
}

std::vector<double> radial_profile(const PerturbationMap& map) {
  const int max_d = int(std::max(map.response.rows(), map.response.cols()));
  std::vector<double> sum(std::size_t(max_d), 0.0), count(std::size_t(max_d), 0.0);
  for (int y = 0; y < map.response.rows(); ++y) {
    for (int x = 0; x < map.response.cols(); ++x) {
      if (map.masked(x, y)) continue;
      const auto d = std::size_t(chebyshev({x, y}, map.base.agent));
      sum[d] += map.response(y, x);
      count[d] += 1.0;
    }
  }
  for (std::size_t d = 0; d < sum.size(); ++d) {
    sum[d] = count[d] > 0 ? sum[d] / count[d] : std::numeric_limits<double>::quiet_NaN();
  }
  return sum;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw InsufficientDataError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

std::vector<Cell> band_placements(const GridState& state, const GridConfig& config, int block,
                                  const BandPredicate& in_band) {
  std::vector<Cell> out;
  for (int y = 0; y + block <= config.height; ++y) {
    for (int x = 0; x + block <= config.width; ++x) {
      bool ok = true;
      for (int dy = 0; dy < block && ok; ++dy) {
        for (int dx = 0; dx < block && ok; ++dx) {
          const Cell c{x + dx, y + dy};
          ok = !state.occupied(c) && c != state.agent && c != state.goal && in_band(state, c);
        }
      }
      if (ok) out.push_back({x, y});
    }
  }
  return out;
}

std::vector<double> band_sensitivity(const nn::Encoder<float>& encoder, const GridWorld& world,
                                     const std::vector<GridState>& layouts,
                                     const BandPredicate& in_band, Rng& rng) {
  const GridConfig& cfg = world.config();
  std::vector<Observation> base, perturbed;
  for (const auto& state : layouts) {
    const auto placements = band_placements(state, cfg, cfg.obstacle_size, in_band);
    if (placements.empty()) continue;
    const Cell tl = placements[std::uniform_int_distribution<std::size_t>(0, placements.size() - 1)(rng)];
    GridState s = state;
    for (int dy = 0; dy < cfg.obstacle_size; ++dy) {
      for (int dx = 0; dx < cfg.obstacle_size; ++dx) s.obstacles(tl.y + dy, tl.x + dx) = true;
    }
    base.push_back(world.render(state));
    perturbed.push_back(world.render(s));
  }
  if (base.empty()) return {};
  const Eigen::VectorXd d = embedding_distances(encoder, base, perturbed);
  return std::vector<double>(d.data(), d.data() + d.size());
}

std::vector<GridState> sample_layouts(const GridConfig& config, int n, std::uint64_t seed) {
  GridWorld world(config);
  std::vector<GridState> out;
  for (int i = 0; i < n; ++i) out.push_back(world.reset(derive_seed(seed, 9000 + std::uint64_t(i))).state);
  return out;
}

SensitivityReport near_far_sensitivity(const nn::Encoder<float>& encoder, const GridConfig& config,
                                       int n_layouts, int near_radius, int far_radius,
                                       std::uint64_t seed) {
  if (n_layouts < 1) throw InsufficientDataError("near/far analysis needs at least one layout");
  if (near_radius < 1 || far_radius <= near_radius) {
    throw ConfigError("near/far radii must satisfy 1 <= near_radius < far_radius");
  }
  const GridWorld world(config);
  const auto layouts = sample_layouts(config, n_layouts, seed);
  SensitivityReport rep;
  rep.near_radius = near_radius;
  rep.far_radius = far_radius;
  Rng near_rng = make_rng(seed, 51), far_rng = make_rng(seed, 52);
  rep.near_distances = band_sensitivity(
      encoder, world, layouts,
      [near_radius](const GridState& s, Cell c) { return chebyshev(c, s.agent) <= near_radius; }, near_rng);
  rep.far_distances = band_sensitivity(
      encoder, world, layouts,
      [far_radius](const GridState& s, Cell c) { return chebyshev(c, s.agent) >= far_radius; }, far_rng);
  if (rep.near_distances.empty() || rep.far_distances.empty()) {
    throw ConfigError("near or far band is empty for radii " + std::to_string(near_radius) + "/" +
                      std::to_string(far_radius));
  }
  rep.near_median = median(rep.near_distances);
  rep.far_median = median(rep.far_distances);
  rep.near_iqr = quantile(rep.near_distances, 0.75) - quantile(rep.near_distances, 0.25);
  rep.far_iqr = quantile(rep.far_distances, 0.75) - quantile(rep.far_distances, 0.25);
  return rep;
}

std::vector<PairResult> nearest_pairs(const nn::Matrix<float>& z, std::size_t k,
                                      std::size_t candidates, std::uint64_t seed) {
  const std::size_t n = std::size_t(z.cols());
  const std::size_t all_pairs = n < 2 ? 0 : n * (n - 1) / 2;
  const bool exhaustive = candidates >= all_pairs;
  const std::size_t budget = exhaustive ? all_pairs : candidates;
  if (k > budget) {
    throw ConfigError("requested " + std::to_string(k) + " pairs but only " +
                      std::to_string(budget) + " candidates exist");
  }
  auto worse = [](const PairResult& a, const PairResult& b) {
    return std::tie(a.distance, a.i, a.j) < std::tie(b.distance, b.i, b.j);
  };
  std::priority_queue<PairResult, std::vector<PairResult>, decltype(worse)> heap(worse);
  auto consider = [&](std::size_t i, std::size_t j) {
    const double d = double((z.col(Eigen::Index(i)) - z.col(Eigen::Index(j))).cwiseAbs().sum());
    PairResult p{i, j, d};
    if (heap.size() < k) {
      heap.push(p);
    } else if (k > 0 && worse(p, heap.top())) {
      heap.pop();
      heap.push(p);
    }
  };
  if (exhaustive) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) consider(i, j);
    }
  } else {
    Rng rng = make_rng(seed, 61);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(budget * 2);
    while (seen.size() < budget) {
      std::size_t i = pick(rng), j = pick(rng);
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      if (!seen.insert(std::uint64_t(i) * n + j).second) continue;
      consider(i, j);
    }
  }
  std::vector<PairResult> out;
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<PairResult> nearest_pairs(const nn::Encoder<float>& encoder, const TransitionDataset& ds,
                                      std::size_t k, std::size_t candidates, std::uint64_t seed) {
  return nearest_pairs(embed_dataset(encoder, ds), k, candidates, seed);
}

double mean_response_radius(const nn::Encoder<float>& encoder, const GridWorld& world,
                            const std::vector<GridState>& layouts) {
  if (layouts.empty()) throw InsufficientDataError("response radius needs at least one layout");
  double sum = 0.0;
  for (const auto& s : layouts) sum += response_radius(perturbation_map(encoder, world, s));
  return sum / double(layouts.size());
}

std::vector<CSweepRow> c_sweep(const TransitionDataset& ds, nn::Encoder<float>& psi,
                               const std::vector<double>& c_values, const BisimConfig& base,
                               std::uint64_t seed, int n_layouts) {
  if (c_values.empty()) throw ConfigError("c sweep needs at least one value of c");
  for (double c : c_values) {
    if (!(c > 0.0 && c < 1.0)) throw ConfigError("c sweep values must lie in (0, 1)");
  }
  const GridWorld world(ds.env_config);
  const auto layouts = sample_layouts(ds.env_config, n_layouts, derive_seed(seed, 71));
  std::vector<CSweepRow> rows;
  for (double c : c_values) {
    BisimConfig cfg = base;
    cfg.c = c;
    try {
      auto result = train_action_bisim(ds, psi, cfg, seed);
      rows.push_back({c, mean_response_radius(result.model.phi, world, layouts)});
    } catch (const NumericalError& e) {
      throw NumericalError("c = " + std::to_string(c) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("c = " + std::to_string(c) + ": " + e.what());
    }
  }
  return rows;
}

CorridorLocality corridor_locality(const nn::Encoder<float>& encoder, const GridWorld& world,
                                   const std::vector<GridState>& layouts) {
  double interior = 0.0, exterior = 0.0;
  long n_in = 0, n_out = 0;
  for (const auto& s : layouts) {
    const auto map = perturbation_map(encoder, world, s);
    const auto reach = shortest_path_lengths(s.obstacles, s.agent);
    const int H = int(reach.rows()), W = int(reach.cols());
    auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < W && y < H && reach(y, x) >= 0; };
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (map.masked(x, y)) continue;
        if (inside(x, y)) {
          interior += map.response(y, x);
          ++n_in;
        } else if (!inside(x - 1, y) && !inside(x + 1, y) && !inside(x, y - 1) && !inside(x, y + 1)) {
          exterior += map.response(y, x);
          ++n_out;
        }
      }
    }
  }
  CorridorLocality r;
  r.interior_mean = n_in ? interior / double(n_in) : 0.0;
  r.exterior_mean = n_out ? exterior / double(n_out) : 0.0;
  r.ratio = r.interior_mean > 0.0 ? r.exterior_mean / r.interior_mean
                                  : std::numeric_limits<double>::infinity();
  return r;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman needs two equal samples of size >= 2");
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return va > 0.0 && vb > 0.0 ? cov / std::sqrt(va * vb) : 0.0;
}

void write_map(const PerturbationMap& map, const std::filesystem::path& dir, const std::string& stem) {
  write_matrix_csv(dir / (stem + ".csv"), map.response);
  write_heatmap_png(dir / (stem + ".png"), map.response);
}

}  // namespace abisim::analysis
