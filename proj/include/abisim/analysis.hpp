#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "abisim/bisim.hpp"
#include "abisim/experience.hpp"
#include "abisim/gridworld.hpp"
#include "abisim/nn/modules.hpp"

namespace abisim::analysis {

/// Embedding change per toggled cell. Masked cells (agent, goal) hold NaN.
struct PerturbationMap {
  Eigen::MatrixXd response;  // (height, width)
  GridState base;
  std::string encoder_tag;

  bool masked(int x, int y) const { return std::isnan(response(y, x)); }
  double total() const;
};

/// L1 distance between the embeddings of each observation column pair (a_k, b_k).
Eigen::VectorXd embedding_distances(const nn::Encoder<float>& encoder,
                                    const std::vector<Observation>& a,
                                    const std::vector<Observation>& b);

/// response(c) = |phi(render(base)) - phi(render(toggle_obstacle(base, c)))|_1 for every cell
/// other than the agent and the goal.
PerturbationMap perturbation_map(const nn::Encoder<float>& encoder, const GridWorld& world,
                                 const GridState& base, const std::string& tag = "");

/// Fraction of the map's response mass at Chebyshev distance [lo, hi] from the agent.
double band_fraction(const PerturbationMap& map, int lo, int hi);

/// Response-weighted mean Chebyshev distance from the agent.
double response_radius(const PerturbationMap& map);

/// Mean response per Chebyshev distance from the agent (index = distance; NaN if no cells).
std::vector<double> radial_profile(const PerturbationMap& map);

struct SensitivityReport {
  std::vector<double> near_distances;
  std::vector<double> far_distances;
  int near_radius = 3;
  int far_radius = 6;
  double near_median = 0.0, far_median = 0.0;
  double near_iqr = 0.0, far_iqr = 0.0;
};

double median(std::vector<double> v);
double quantile(std::vector<double> v, double q);

/// Candidate 2x2 block placements (top-left cells) for a state; a placement qualifies when all
/// its cells are in bounds, free, distinct from agent and goal, and accepted by `in_band`.
using BandPredicate = std::function<bool(const GridState&, Cell)>;
std::vector<Cell> band_placements(const GridState& state, const GridConfig& config, int block,
                                  const BandPredicate& in_band);

/// Embedding distances caused by adding one random qualifying block per layout.
std::vector<double> band_sensitivity(const nn::Encoder<float>& encoder, const GridWorld& world,
                                     const std::vector<GridState>& layouts,
                                     const BandPredicate& in_band, Rng& rng);

/// Near band: every block cell within Chebyshev `near_radius` of the agent; far band: every block
/// cell at least `far_radius` away.
SensitivityReport near_far_sensitivity(const nn::Encoder<float>& encoder, const GridConfig& config,
                                       int n_layouts, int near_radius, int far_radius,
                                       std::uint64_t seed);

struct PairResult {
  std::size_t i = 0;
  std::size_t j = 0;
  double distance = 0.0;
};

/// k closest embedding pairs (i < j) among `candidates` random pairs of columns of `z`; the scan
/// is exhaustive when the budget covers every pair.
std::vector<PairResult> nearest_pairs(const nn::Matrix<float>& z, std::size_t k,
                                      std::size_t candidates, std::uint64_t seed);
std::vector<PairResult> nearest_pairs(const nn::Encoder<float>& encoder, const TransitionDataset& ds,
                                      std::size_t k, std::size_t candidates = 1000000,
                                      std::uint64_t seed = 0);

/// Reset states of `n` layouts drawn from `seed`.
std::vector<GridState> sample_layouts(const GridConfig& config, int n, std::uint64_t seed);

/// Mean response_radius over the given layouts.
double mean_response_radius(const nn::Encoder<float>& encoder, const GridWorld& world,
                            const std::vector<GridState>& layouts);

struct CSweepRow {
  double c = 0.0;
  double response_radius = 0.0;
};

/// Trains one multi-step encoder per c and measures its response radius on `n_layouts` layouts.
std::vector<CSweepRow> c_sweep(const TransitionDataset& ds, nn::Encoder<float>& psi,
                               const std::vector<double>& c_values, const BisimConfig& base,
                               std::uint64_t seed, int n_layouts = 20);

struct CorridorLocality {
  double interior_mean = 0.0;
  double exterior_mean = 0.0;
  double ratio = 0.0;
};

/// Interior cells: free cells reachable from the agent. Exterior cells: all other cells that are
/// not 4-adjacent to an interior cell.
CorridorLocality corridor_locality(const nn::Encoder<float>& encoder, const GridWorld& world,
                                   const std::vector<GridState>& layouts);

double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Writes `<stem>.csv` and `<stem>.png` into `dir`.
void write_map(const PerturbationMap& map, const std::filesystem::path& dir, const std::string& stem);

}  // namespace abisim::analysis
