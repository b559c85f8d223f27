#include "abisim/gridworld.hpp"

#include <deque>
#include <utility>

#include "abisim/json_util.hpp"

namespace abisim {

namespace {

struct Generated {
  OccupancyGrid obstacles;
  Cell agent;
};

OccupancyGrid empty_grid(const GridConfig& config) {
  return OccupancyGrid::Constant(config.height, config.width, false);
}

Cell uniform_cell(const GridConfig& config, Rng& rng) {
  std::uniform_int_distribution<int> dx(0, config.width - 1), dy(0, config.height - 1);
  const int x = dx(rng);
  const int y = dy(rng);
  return {x, y};
}

bool block_covers(Cell top_left, int size, Cell c) {
  return c.x >= top_left.x && c.x < top_left.x + size && c.y >= top_left.y && c.y < top_left.y + size;
}

void fill_block(OccupancyGrid& grid, Cell top_left, int size) {
  grid.block(top_left.y, top_left.x, size, size).setConstant(true);
}

/// Draws a block position that avoids every cell in `avoid`; false if none found in budget.
bool draw_block(const GridConfig& config, Rng& rng, const std::vector<Cell>& avoid, Cell& out) {
  std::uniform_int_distribution<int> dx(0, config.width - config.obstacle_size);
  std::uniform_int_distribution<int> dy(0, config.height - config.obstacle_size);
  for (int tries = 0; tries < 1000; ++tries) {
    const int x = dx(rng);
    const int y = dy(rng);
    const Cell top_left{x, y};
    bool ok = true;
    for (const Cell& c : avoid) ok = ok && !block_covers(top_left, config.obstacle_size, c);
    if (ok) {
      out = top_left;
      return true;
    }
  }
  return false;
}

bool try_random(const GridConfig& config, Rng& rng, Generated& out) {
  out.agent = uniform_cell(config, rng);
  out.obstacles = empty_grid(config);
  for (int i = 0; i < config.n_obstacles; ++i) {
    Cell top_left;
    if (!draw_block(config, rng, {out.agent, config.goal}, top_left)) return false;
    fill_block(out.obstacles, top_left, config.obstacle_size);
  }
  return is_reachable(out.obstacles, out.agent, config.goal);
}

// A one-cell-wide rectangular ring through the goal, sealed by walls on both sides.
// Blocks are scattered over everything that is not corridor, so obstacle and free cells
// appear both inside the ring's hole and outside it; none of them are reachable.
bool try_corridor(const GridConfig& config, Rng& rng, Generated& out) {
  const Cell g = config.goal;
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  bool found = false;
  for (int tries = 0; tries < 10000 && !found; ++tries) {
    std::uniform_int_distribution<int> ax(1, config.width - 4), ay(1, config.height - 4);
    x0 = ax(rng);
    y0 = ay(rng);
    std::uniform_int_distribution<int> bx(x0 + 2, config.width - 2), by(y0 + 2, config.height - 2);
    x1 = bx(rng);
    y1 = by(rng);
    const bool on_vertical = (g.x == x0 || g.x == x1) && g.y >= y0 && g.y <= y1;
    const bool on_horizontal = (g.y == y0 || g.y == y1) && g.x >= x0 && g.x <= x1;
    found = on_vertical || on_horizontal;
  }
  if (!found) return false;

  OccupancyGrid corridor = empty_grid(config);
  std::vector<Cell> corridor_cells;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (x == x0 || x == x1 || y == y0 || y == y1) {
        corridor(y, x) = true;
        corridor_cells.push_back({x, y});
      }
    }
  }

  out.obstacles = empty_grid(config);
  for (int i = 0; i < config.n_obstacles; ++i) {
    Cell top_left;
    if (!draw_block(config, rng, corridor_cells, top_left)) return false;
    fill_block(out.obstacles, top_left, config.obstacle_size);
  }
  for (const Cell& c : corridor_cells) {
    for (const Cell& d : kActionDelta) {
      const Cell n{c.x + d.x, c.y + d.y};
      if (config.in_bounds(n) && !corridor(n.y, n.x)) out.obstacles(n.y, n.x) = true;
    }
  }
  std::uniform_int_distribution<std::size_t> pick(0, corridor_cells.size() - 1);
  out.agent = corridor_cells[pick(rng)];
  return true;
}

// Perfect maze by randomized depth-first backtracking over nodes on the goal's parity lattice.
bool try_maze(const GridConfig& config, Rng& rng, Generated& out) {
  const Cell g = config.goal;
  out.obstacles = OccupancyGrid::Constant(config.height, config.width, true);
  OccupancyGrid visited = empty_grid(config);
  auto is_node = [&](Cell c) {
    return config.in_bounds(c) && (c.x - g.x) % 2 == 0 && (c.y - g.y) % 2 == 0;
  };
  std::vector<Cell> stack{g};
  visited(g.y, g.x) = true;
  out.obstacles(g.y, g.x) = false;
  while (!stack.empty()) {
    const Cell cur = stack.back();
    std::vector<int> options;
    for (int a = 0; a < kNumActions; ++a) {
      const Cell n{cur.x + 2 * kActionDelta[a].x, cur.y + 2 * kActionDelta[a].y};
      if (is_node(n) && !visited(n.y, n.x)) options.push_back(a);
    }
    if (options.empty()) {
      stack.pop_back();
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
    const Cell d = kActionDelta[options[pick(rng)]];
    const Cell n{cur.x + 2 * d.x, cur.y + 2 * d.y};
    out.obstacles(cur.y + d.y, cur.x + d.x) = false;
    out.obstacles(n.y, n.x) = false;
    visited(n.y, n.x) = true;
    stack.push_back(n);
  }
  std::vector<Cell> free_cells;
  for (int y = 0; y < config.height; ++y) {
    for (int x = 0; x < config.width; ++x) {
      if (!out.obstacles(y, x)) free_cells.push_back({x, y});
    }
  }
  std::uniform_int_distribution<std::size_t> pick(0, free_cells.size() - 1);
  out.agent = free_cells[pick(rng)];
  return true;
}

Generated generate(const GridConfig& config, Rng& rng) {
  Generated out;
  for (int attempt = 0; attempt < config.max_generation_attempts; ++attempt) {
    bool ok = false;
    switch (config.layout) {
      case Layout::random: ok = try_random(config, rng, out); break;
      case Layout::corridor: ok = try_corridor(config, rng, out); break;
      case Layout::maze: ok = try_maze(config, rng, out); break;
    }
    if (ok) return out;
  }
  throw GenerationError("layout generation failed after " +
                        std::to_string(config.max_generation_attempts) + " attempts");
}

}  // namespace

std::string to_string(Layout layout) {
  switch (layout) {
    case Layout::random: return "random";
    case Layout::corridor: return "corridor";
    case Layout::maze: return "maze";
  }
  return "?";
}

std::string to_string(Distractor distractor) {
  return distractor == Distractor::none ? "none" : "scrolling_texture";
}

Layout layout_from_string(const std::string& s) {
  if (s == "random") return Layout::random;
  if (s == "corridor") return Layout::corridor;
  if (s == "maze") return Layout::maze;
  throw ConfigError("unknown layout '" + s + "'");
}

Distractor distractor_from_string(const std::string& s) {
  if (s == "none") return Distractor::none;
  if (s == "scrolling_texture") return Distractor::scrolling_texture;
  throw ConfigError("unknown distractor '" + s + "'");
}

void GridConfig::validate() const {
  if (width < 3 || height < 3) throw ConfigError("grid must be at least 3x3");
  if (!in_bounds(goal)) throw ConfigError("goal outside the grid");
  if (episode_len < 1) throw ConfigError("episode_len must be >= 1");
  if (n_obstacles < 0) throw ConfigError("n_obstacles must be >= 0");
  if (n_obstacles > 0 && (obstacle_size < 1 || obstacle_size > std::min(width, height))) {
    throw ConfigError("obstacle_size must fit in the grid");
  }
  if (layout == Layout::corridor && (width < 5 || height < 5)) {
    throw ConfigError("corridor layout needs a grid of at least 5x5");
  }
  if (max_generation_attempts < 1) throw ConfigError("max_generation_attempts must be >= 1");
}

GridWorld::GridWorld(GridConfig config) : config_(std::move(config)) { config_.validate(); }

GridWorld::ResetResult GridWorld::reset(std::uint64_t seed) const {
  Rng rng = make_rng(seed);
  Generated g = generate(config_, rng);
  GridState state;
  state.agent = g.agent;
  state.obstacles = std::move(g.obstacles);
  state.goal = config_.goal;
  state.t = 0;
  state.distractor_phase = 0;
  state.distractor_seed = config_.distractor == Distractor::none ? 0 : rng();
  Observation obs = render(state);
  return {std::move(state), std::move(obs)};
}

Cell GridWorld::next_agent(const GridState& state, Action action) const {
  if (state.agent == state.goal) return state.agent;
  const Cell d = kActionDelta[static_cast<int>(action)];
  const Cell target{state.agent.x + d.x, state.agent.y + d.y};
  if (!config_.in_bounds(target) || state.occupied(target)) return state.agent;
  return target;
}

StepResult GridWorld::step(const GridState& state, Action action) const {
  if (state.t >= config_.episode_len) {
    throw EpisodeFinishedError("step() called on a finished episode (t = " +
                               std::to_string(state.t) + ")");
  }
  StepResult r;
  r.state = state;
  r.state.agent = next_agent(state, action);
  r.state.t = state.t + 1;
  r.state.distractor_phase = state.distractor_phase + 1;
  r.reward = r.state.agent == r.state.goal ? 0.0f : -1.0f;
  r.done = r.state.t == config_.episode_len;
  r.observation = render(r.state);
  return r;
}

std::int8_t distractor_texel(std::uint64_t texture_seed, int phase, int x, int y, int width) {
  const int col = ((x + phase) % width + width) % width;
  const std::uint64_t h = mix_seed(texture_seed ^ mix_seed(std::uint64_t(y) * 4099u + col));
  return static_cast<std::int8_t>(int(h % 255) - 127);
}

Observation GridWorld::render(const GridState& state) const {
  Observation obs;
  obs.channels = config_.channels();
  obs.height = config_.height;
  obs.width = config_.width;
  obs.data.assign(std::size_t(obs.channels) * obs.height * obs.width, std::int8_t(-1));
  obs.data[obs.index(Observation::kAgent, state.agent.y, state.agent.x)] = 1;
  obs.data[obs.index(Observation::kGoal, state.goal.y, state.goal.x)] = 1;
  for (int y = 0; y < obs.height; ++y) {
    for (int x = 0; x < obs.width; ++x) {
      if (state.obstacles(y, x)) obs.data[obs.index(Observation::kObstacles, y, x)] = 1;
      if (obs.channels > Observation::kDistractor) {
        obs.data[obs.index(Observation::kDistractor, y, x)] =
            distractor_texel(state.distractor_seed, state.distractor_phase, x, y, obs.width);
      }
    }
  }
  return obs;
}

OccupancyGrid generate_layout(const GridConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed);
  return generate(config, rng).obstacles;
}

Eigen::ArrayXXi shortest_path_lengths(const OccupancyGrid& obstacles, Cell src) {
  const int h = int(obstacles.rows()), w = int(obstacles.cols());
  Eigen::ArrayXXi dist = Eigen::ArrayXXi::Constant(h, w, -1);
  if (src.x < 0 || src.y < 0 || src.x >= w || src.y >= h || obstacles(src.y, src.x)) return dist;
  std::deque<Cell> queue{src};
  dist(src.y, src.x) = 0;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (const Cell& d : kActionDelta) {
      const Cell n{c.x + d.x, c.y + d.y};
      if (n.x < 0 || n.y < 0 || n.x >= w || n.y >= h) continue;
      if (obstacles(n.y, n.x) || dist(n.y, n.x) >= 0) continue;
      dist(n.y, n.x) = dist(c.y, c.x) + 1;
      queue.push_back(n);
    }
  }
  return dist;
}

bool is_reachable(const OccupancyGrid& obstacles, Cell src, Cell dst) {
  const int h = int(obstacles.rows()), w = int(obstacles.cols());
  auto check = [&](Cell c, const char* what) {
    if (c.x < 0 || c.y < 0 || c.x >= w || c.y >= h) {
      throw InvalidQueryError(std::string(what) + " cell out of bounds");
    }
    if (obstacles(c.y, c.x)) throw InvalidQueryError(std::string(what) + " cell is occupied");
  };
  check(src, "source");
  check(dst, "destination");
  return shortest_path_lengths(obstacles, src)(dst.y, dst.x) >= 0;
}

GridState toggle_obstacle(const GridState& state, Cell cell) {
  if (cell.x < 0 || cell.y < 0 || cell.x >= state.obstacles.cols() ||
      cell.y >= state.obstacles.rows()) {
    throw InvalidPerturbationError("toggled cell out of bounds");
  }
  if (cell == state.agent) throw InvalidPerturbationError("cannot toggle the agent cell");
  if (cell == state.goal) throw InvalidPerturbationError("cannot toggle the goal cell");
  GridState out = state;
  out.obstacles(cell.y, cell.x) = !out.obstacles(cell.y, cell.x);
  return out;
}

GridState decode_observation(const Observation& obs) {
  GridState s;
  s.obstacles = OccupancyGrid::Constant(obs.height, obs.width, false);
  for (int y = 0; y < obs.height; ++y) {
    for (int x = 0; x < obs.width; ++x) {
      if (obs.raw(Observation::kAgent, y, x) > 0) s.agent = {x, y};
      if (obs.raw(Observation::kGoal, y, x) > 0) s.goal = {x, y};
      s.obstacles(y, x) = obs.raw(Observation::kObstacles, y, x) > 0;
    }
  }
  return s;
}

void to_json(nlohmann::json& j, const Cell& c) { j = nlohmann::json::array({c.x, c.y}); }

void from_json(const nlohmann::json& j, Cell& c) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
    throw ConfigError("a cell must be an [x, y] integer pair");
  }
  c.x = j[0].get<int>();
  c.y = j[1].get<int>();
}

void to_json(nlohmann::json& j, const GridConfig& c) {
  j = nlohmann::json{{"width", c.width},
                     {"height", c.height},
                     {"n_obstacles", c.n_obstacles},
                     {"obstacle_size", c.obstacle_size},
                     {"goal", c.goal},
                     {"episode_len", c.episode_len},
                     {"layout", to_string(c.layout)},
                     {"distractor", to_string(c.distractor)},
                     {"seed", c.seed},
                     {"max_generation_attempts", c.max_generation_attempts}};
}

void from_json(const nlohmann::json& j, GridConfig& c) {
  using namespace json_util;
  const std::string path = "env";
  reject_unknown(j,
                 {"width", "height", "n_obstacles", "obstacle_size", "goal", "episode_len", "layout",
                  "distractor", "seed", "max_generation_attempts"},
                 path);
  read(j, "width", c.width, path);
  read(j, "height", c.height, path);
  read(j, "n_obstacles", c.n_obstacles, path);
  read(j, "obstacle_size", c.obstacle_size, path);
  if (j.contains("goal")) {
    try {
      c.goal = j.at("goal").get<Cell>();
    } catch (const ConfigError& e) {
      throw ConfigError("type mismatch at 'env.goal': " + std::string(e.what()));
    }
  }
  read(j, "episode_len", c.episode_len, path);
  std::string layout = to_string(c.layout), distractor = to_string(c.distractor);
  read(j, "layout", layout, path);
  read(j, "distractor", distractor, path);
  c.layout = layout_from_string(layout);
  c.distractor = distractor_from_string(distractor);
  read(j, "seed", c.seed, path);
  read(j, "max_generation_attempts", c.max_generation_attempts, path);
}

std::string grid_to_string(const OccupancyGrid& grid) {
  std::string s;
  s.reserve(std::size_t(grid.size()));
  for (int y = 0; y < grid.rows(); ++y) {
    for (int x = 0; x < grid.cols(); ++x) s.push_back(grid(y, x) ? '1' : '0');
  }
  return s;
}

OccupancyGrid grid_from_string(const std::string& s, int width, int height) {
  if (s.size() != std::size_t(width) * height) {
    throw ConfigError("grid string has " + std::to_string(s.size()) + " cells, expected " +
                      std::to_string(width * height));
  }
  OccupancyGrid grid(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const char ch = s[std::size_t(y) * width + x];
      if (ch != '0' && ch != '1') throw ConfigError("grid string must contain only 0/1");
      grid(y, x) = ch == '1';
    }
  }
  return grid;
}

nlohmann::json layout_to_json(const GridConfig& config, const OccupancyGrid& grid,
                              std::uint64_t seed) {
  return {{"config", config}, {"seed", seed}, {"grid", grid_to_string(grid)}};
}

nlohmann::json state_to_json(const GridConfig& config, const GridState& state, std::uint64_t seed) {
  nlohmann::json j = layout_to_json(config, state.obstacles, seed);
  j["agent"] = state.agent;
  j["goal"] = state.goal;
  j["t"] = state.t;
  j["distractor_phase"] = state.distractor_phase;
  j["distractor_seed"] = state.distractor_seed;
  return j;
}

GridState state_from_json(const nlohmann::json& j) {
  const GridConfig config = j.at("config").get<GridConfig>();
  GridState s;
  s.obstacles = grid_from_string(j.at("grid").get<std::string>(), config.width, config.height);
  s.agent = j.at("agent").get<Cell>();
  s.goal = j.at("goal").get<Cell>();
  s.t = j.at("t").get<int>();
  s.distractor_phase = j.at("distractor_phase").get<int>();
  s.distractor_seed = j.at("distractor_seed").get<std::uint64_t>();
  return s;
}

}  // namespace abisim
