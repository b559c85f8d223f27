#pragma once

#include <Eigen/Core>
#include "json.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "abisim/common.hpp"

namespace abisim {

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

inline int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }
inline int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

enum class Action : int { up = 0, down = 1, left = 2, right = 3 };
inline constexpr int kNumActions = 4;

/// Unit displacement of each action, in (dx, dy) with y growing downwards.
inline constexpr std::array<Cell, kNumActions> kActionDelta{{{0, -1}, {0, 1}, {-1, 0}, {1, 0}}};

enum class Layout { random, corridor, maze };
enum class Distractor { none, scrolling_texture };

std::string to_string(Layout layout);
std::string to_string(Distractor distractor);
Layout layout_from_string(const std::string& s);
Distractor distractor_from_string(const std::string& s);

struct GridConfig {
  int width = 15;
  int height = 15;
  int n_obstacles = 20;
  int obstacle_size = 2;
  Cell goal{7, 7};
  int episode_len = 50;
  Layout layout = Layout::random;
  Distractor distractor = Distractor::none;
  std::uint64_t seed = 0;
  int max_generation_attempts = 1000;

  bool operator==(const GridConfig&) const = default;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width && c.y < height; }
  int channels() const { return distractor == Distractor::none ? 3 : 4; }
};

/// Obstacle occupancy indexed (y, x).
using OccupancyGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct GridState {
  Cell agent;
  OccupancyGrid obstacles;
  Cell goal;
  int t = 0;
  int distractor_phase = 0;
  std::uint64_t distractor_seed = 0;

  bool occupied(Cell c) const { return obstacles(c.y, c.x); }
  bool operator==(const GridState& o) const {
    return agent == o.agent && goal == o.goal && t == o.t &&
           distractor_phase == o.distractor_phase && distractor_seed == o.distractor_seed &&
           obstacles.rows() == o.obstacles.rows() && obstacles.cols() == o.obstacles.cols() &&
           (obstacles == o.obstacles).all();
  }
};

/// Image observation, channel-major [c][y][x], stored as signed bytes. Semantic channels
/// (agent, obstacles, goal) hold +-1 literally; the optional distractor channel holds
/// q in [-127, 127] standing for q / 127.
struct Observation {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int8_t> data;

  static constexpr int kAgent = 0, kObstacles = 1, kGoal = 2, kDistractor = 3;

  std::size_t index(int c, int y, int x) const {
    return (std::size_t(c) * height + y) * width + x;
  }
  std::int8_t raw(int c, int y, int x) const { return data[index(c, y, x)]; }
  float value(int c, int y, int x) const {
    const float q = raw(c, y, x);
    return c == kDistractor ? q / 127.0f : q;
  }
  std::size_t size() const { return data.size(); }
  bool operator==(const Observation&) const = default;
};

struct StepResult {
  GridState state;
  Observation observation;
  float reward = -1.0f;
  bool done = false;
};

/// Deterministic 2-D navigation MDP. The object is immutable; all state lives in GridState.
class GridWorld {
public:
  explicit GridWorld(GridConfig config);

  const GridConfig& config() const { return config_; }

  struct ResetResult {
    GridState state;
    Observation observation;
  };

  ResetResult reset(std::uint64_t seed) const;
  StepResult step(const GridState& state, Action action) const;
  Observation render(const GridState& state) const;

  /// Agent cell after taking `action`, ignoring the step counter.
  Cell next_agent(const GridState& state, Action action) const;

private:
  GridConfig config_;
};

/// Obstacle layout for (config, seed); equals the obstacles of reset(seed) for random layouts.
OccupancyGrid generate_layout(const GridConfig& config, std::uint64_t seed);

/// 4-connected BFS over free cells. Throws InvalidQueryError if src or dst is occupied
/// or out of bounds.
bool is_reachable(const OccupancyGrid& obstacles, Cell src, Cell dst);

/// BFS shortest-path lengths from `src` over free cells; -1 where unreachable.
Eigen::ArrayXXi shortest_path_lengths(const OccupancyGrid& obstacles, Cell src);

/// Copy of `state` with the occupancy of `cell` flipped.
GridState toggle_obstacle(const GridState& state, Cell cell);

/// Recovers agent, obstacles and goal from an observation (t and distractor fields zeroed).
GridState decode_observation(const Observation& obs);

/// Distractor texture value q in [-127, 127] at (x, y) for a given texture seed and phase.
std::int8_t distractor_texel(std::uint64_t texture_seed, int phase, int x, int y, int width);

void to_json(nlohmann::json& j, const Cell& c);
void from_json(const nlohmann::json& j, Cell& c);
void to_json(nlohmann::json& j, const GridConfig& c);
void from_json(const nlohmann::json& j, GridConfig& c);

/// Row-major 0/1 string of an occupancy grid and its inverse.
std::string grid_to_string(const OccupancyGrid& grid);
OccupancyGrid grid_from_string(const std::string& s, int width, int height);

nlohmann::json state_to_json(const GridConfig& config, const GridState& state, std::uint64_t seed);
GridState state_from_json(const nlohmann::json& j);
nlohmann::json layout_to_json(const GridConfig& config, const OccupancyGrid& grid,
                              std::uint64_t seed);

}  // namespace abisim
