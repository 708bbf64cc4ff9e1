#include "gasp/gridworld.hpp"

#include <deque>
#include <fstream>
#include <sstream>

#include "gasp/error.hpp"
#include "gasp/policy.hpp"

namespace gasp {

namespace {

constexpr std::array<std::array<int, 2>, kNumActions> kDeltas = {{
    {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}}};

constexpr std::string_view kCanonicalMaze =
    "; canonical 12x12 recovery maze\n"
    "; S clean start (top-right), G goal (bottom-left), M misleading start,\n"
    "; J the one-cell junction that is the only way out of M's corridor.\n"
    "############\n"
    "#.........S#\n"
    "#..........#\n"
    "#..........#\n"
    "#..........#\n"
    "#..........#\n"
    "#...#J######\n"
    "#...#.######\n"
    "#...#.######\n"
    "#...#.....M#\n"
    "#G..########\n"
    "############\n";

}  // namespace

std::string_view action_name(Action a) {
  static constexpr std::array<std::string_view, kNumActions> kNames = {
      "N", "NE", "E", "SE", "S", "SW", "W", "NW"};
  return kNames[to_index(a)];
}

Cell offset(Cell cell, Action a) {
  const auto& d = kDeltas[to_index(a)];
  return {cell.row + d[0], cell.col + d[1]};
}

GridWorld::GridWorld(int width, int height, std::vector<bool> walls, Cell goal,
                     int horizon, Landmarks landmarks)
    : width_(width),
      height_(height),
      walls_(std::move(walls)),
      goal_(goal),
      horizon_(horizon),
      landmarks_(landmarks) {
  require(width_ > 0 && height_ > 0, "maze dimensions must be positive");
  require(walls_.size() == static_cast<std::size_t>(width_) *
                               static_cast<std::size_t>(height_),
          "wall mask size does not match dimensions");
  if (horizon_ <= 0) {
    require(landmarks_.clean_start.has_value(),
            "default horizon needs a clean start");
    require(is_open(goal_) && is_open(*landmarks_.clean_start),
            "goal and clean start must be open cells",
            ErrorCode::kInvariantViolation);
    const auto d = shortest_path(*landmarks_.clean_start, goal_);
    require(d.has_value(), "goal unreachable from clean start",
            ErrorCode::kInvariantViolation);
    horizon_ = 3 * *d;
  }
  validate();
}

void GridWorld::validate() const {
  require(in_bounds(goal_) && !is_wall(goal_),
          "goal must be an in-bounds open cell", ErrorCode::kInvariantViolation);
  require(horizon_ > 0, "horizon must be positive",
          ErrorCode::kInvariantViolation);
  for (const auto& lm : {landmarks_.clean_start, landmarks_.misleading_start,
                         landmarks_.junction}) {
    if (lm) {
      require(is_open(*lm), "landmark must be an open cell",
              ErrorCode::kInvariantViolation);
    }
  }
  for (std::size_t i = 0; i < walls_.size(); ++i) {
    if (walls_[i]) continue;
    const Cell c = cell_at(i);
    bool has_exit = false;
    for (Action a : kAllActions) {
      if (is_open(offset(c, a))) {
        has_exit = true;
        break;
      }
    }
    require(has_exit, "open cell has no legal move",
            ErrorCode::kInvariantViolation);
  }
  for (const auto& lm : {landmarks_.clean_start, landmarks_.misleading_start}) {
    if (!lm) continue;
    const auto d = shortest_path(*lm, goal_);
    require(d.has_value() && *d <= horizon_,
            "start cannot reach the goal within the horizon",
            ErrorCode::kInvariantViolation);
  }
}

Cell GridWorld::clean_start() const {
  require(landmarks_.clean_start.has_value(), "maze has no clean start");
  return *landmarks_.clean_start;
}

Cell GridWorld::misleading_start() const {
  require(landmarks_.misleading_start.has_value(),
          "maze has no misleading start");
  return *landmarks_.misleading_start;
}

Cell GridWorld::junction() const {
  require(landmarks_.junction.has_value(), "maze has no junction");
  return *landmarks_.junction;
}

Cell GridWorld::move(Cell c, Action a) const {
  const Cell next = offset(c, a);
  return is_open(next) ? next : c;
}

std::vector<Cell> GridWorld::open_cells() const {
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < walls_.size(); ++i) {
    if (!walls_[i]) cells.push_back(cell_at(i));
  }
  return cells;
}

std::optional<int> GridWorld::shortest_path(Cell from, Cell to,
                                            std::optional<Cell> blocked) const {
  if (!is_open(from) || !is_open(to)) return std::nullopt;
  if (blocked && (*blocked == from || *blocked == to)) return std::nullopt;
  if (from == to) return 0;
  std::vector<int> dist(num_cells(), -1);
  std::deque<Cell> frontier{from};
  dist[index(from)] = 0;
  while (!frontier.empty()) {
    const Cell c = frontier.front();
    frontier.pop_front();
    for (Action a : kAllActions) {
      const Cell n = offset(c, a);
      if (!is_open(n) || (blocked && n == *blocked)) continue;
      if (dist[index(n)] >= 0) continue;
      dist[index(n)] = dist[index(c)] + 1;
      if (n == to) return dist[index(n)];
      frontier.push_back(n);
    }
  }
  return std::nullopt;
}

std::string GridWorld::to_text() const {
  std::string out;
  out += "horizon " + std::to_string(horizon_) + "\n";
  for (int r = 0; r < height_; ++r) {
    for (int c = 0; c < width_; ++c) {
      const Cell cell{r, c};
      char ch = is_wall(cell) ? '#' : '.';
      if (cell == goal_) ch = 'G';
      if (landmarks_.clean_start == cell) ch = 'S';
      if (landmarks_.misleading_start == cell) ch = 'M';
      if (landmarks_.junction == cell) ch = 'J';
      out += ch;
    }
    out += '\n';
  }
  return out;
}

GridWorld parse_maze(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::string> rows;
  int horizon = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == ';') continue;
    if (line.rfind("horizon", 0) == 0) {
      std::istringstream fields(line.substr(7));
      require(static_cast<bool>(fields >> horizon) && horizon > 0,
              "maze: bad horizon line '" + line + "'");
      continue;
    }
    rows.push_back(line);
  }
  require(!rows.empty(), "maze: no grid rows");
  const auto width = rows.front().size();
  const int height = static_cast<int>(rows.size());
  std::vector<bool> walls;
  walls.reserve(width * rows.size());
  std::optional<Cell> goal;
  GridWorld::Landmarks landmarks;
  auto set_once = [](std::optional<Cell>& slot, Cell c, char ch) {
    require(!slot.has_value(), std::string("maze: duplicate '") + ch + "'");
    slot = c;
  };
  for (int r = 0; r < height; ++r) {
    require(rows[r].size() == width, "maze: ragged row " + std::to_string(r));
    for (std::size_t c = 0; c < width; ++c) {
      const Cell cell{r, static_cast<int>(c)};
      const char ch = rows[r][c];
      switch (ch) {
        case '#': walls.push_back(true); break;
        case '.': walls.push_back(false); break;
        case 'G': walls.push_back(false); set_once(goal, cell, ch); break;
        case 'S': walls.push_back(false); set_once(landmarks.clean_start, cell, ch); break;
        case 'M': walls.push_back(false); set_once(landmarks.misleading_start, cell, ch); break;
        case 'J': walls.push_back(false); set_once(landmarks.junction, cell, ch); break;
        default:
          fail(ErrorCode::kInvalidArgument,
               std::string("maze: unknown cell character '") + ch + "'");
      }
    }
  }
  require(goal.has_value(), "maze: no goal 'G'");
  return GridWorld(static_cast<int>(width), height, std::move(walls), *goal,
                   horizon, landmarks);
}

GridWorld load_maze(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open maze file " + path.string(), ErrorCode::kIo);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_maze(buffer.str());
}

std::string_view canonical_maze_text() { return kCanonicalMaze; }

GridWorld canonical_maze() { return parse_maze(kCanonicalMaze); }

MazeState step(const GridWorld& world, const MazeState& state, Action action) {
  require(world.is_open(state.cell), "step: state is not an open cell");
  require(state.steps_taken >= 0 && state.steps_taken < world.horizon(),
          "step: horizon exhausted");
  return {world.move(state.cell, action), state.steps_taken + 1};
}

Trajectory rollout(const GridWorld& world, const PolicyTable& policy,
                   const MazeState& start, Rng& rng) {
  require(world.valid(start), "rollout: invalid start state");
  Trajectory traj;
  traj.start = start;
  traj.states.push_back(start);
  MazeState s = start;
  while (s.cell != world.goal() && s.steps_taken < world.horizon()) {
    const Action a = policy.sample(world.index(s.cell), rng);
    s = {world.move(s.cell, a), s.steps_taken + 1};
    traj.moves.push_back(a);
    traj.states.push_back(s);
  }
  traj.reward = s.cell == world.goal() ? 1 : 0;
  return traj;
}

}  // namespace gasp
