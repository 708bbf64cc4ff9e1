#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gasp/random.hpp"

namespace gasp {

class PolicyTable;

enum class Action : std::uint8_t { kN = 0, kNE, kE, kSE, kS, kSW, kW, kNW };

inline constexpr std::size_t kNumActions = 8;

inline constexpr std::array<Action, kNumActions> kAllActions = {
    Action::kN, Action::kNE, Action::kE, Action::kSE,
    Action::kS, Action::kSW, Action::kW, Action::kNW};

constexpr std::size_t to_index(Action a) { return static_cast<std::size_t>(a); }
constexpr Action action_from_index(std::size_t i) { return static_cast<Action>(i); }

std::string_view action_name(Action a);

struct Cell {
  int row = 0;
  int col = 0;
  auto operator<=>(const Cell&) const = default;
};

// Row grows downward (N is row - 1).
Cell offset(Cell cell, Action a);

struct MazeState {
  Cell cell;
  int steps_taken = 0;
  auto operator<=>(const MazeState&) const = default;
};

struct Trajectory {
  MazeState start;
  std::vector<Action> moves;
  std::vector<MazeState> states;  // states.size() == moves.size() + 1
  int reward = 0;

  std::size_t length() const { return moves.size(); }
};

// Deterministic 8-connected maze with a single goal and a step horizon.
// Moves into walls or off the grid leave the cell unchanged but still cost a
// step, so every cell always offers all eight actions.
class GridWorld {
 public:
  struct Landmarks {
    std::optional<Cell> clean_start;
    std::optional<Cell> misleading_start;
    std::optional<Cell> junction;
    bool operator==(const Landmarks&) const = default;
  };

  // horizon <= 0 selects 3 x shortest path from the clean start to the goal.
  GridWorld(int width, int height, std::vector<bool> walls, Cell goal,
            int horizon, Landmarks landmarks = {});

  int width() const { return width_; }
  int height() const { return height_; }
  int horizon() const { return horizon_; }
  Cell goal() const { return goal_; }
  const Landmarks& landmarks() const { return landmarks_; }
  Cell clean_start() const;
  Cell misleading_start() const;
  Cell junction() const;

  std::size_t num_cells() const { return walls_.size(); }
  bool in_bounds(Cell c) const {
    return c.row >= 0 && c.row < height_ && c.col >= 0 && c.col < width_;
  }
  bool is_wall(Cell c) const { return walls_[index(c)]; }
  bool is_open(Cell c) const { return in_bounds(c) && !is_wall(c); }
  std::size_t index(Cell c) const {
    return static_cast<std::size_t>(c.row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(c.col);
  }
  Cell cell_at(std::size_t index) const {
    return {static_cast<int>(index / static_cast<std::size_t>(width_)),
            static_cast<int>(index % static_cast<std::size_t>(width_))};
  }
  // Destination of `a` from `c`, or `c` itself when blocked.
  Cell move(Cell c, Action a) const;
  std::vector<Cell> open_cells() const;

  bool valid(const MazeState& s) const {
    return is_open(s.cell) && s.steps_taken >= 0 && s.steps_taken <= horizon_;
  }

  // Fewest moves between two open cells, optionally treating one extra cell
  // as a wall. Empty when unreachable.
  std::optional<int> shortest_path(Cell from, Cell to,
                                   std::optional<Cell> blocked = {}) const;

  // Plain-text layout, see docs in data/README.md.
  std::string to_text() const;

  bool operator==(const GridWorld&) const = default;

 private:
  void validate() const;

  int width_;
  int height_;
  std::vector<bool> walls_;
  Cell goal_;
  int horizon_;
  Landmarks landmarks_;
};

// Parses the plain-text layout: '#' wall, '.' open, 'G' goal, 'S' clean start,
// 'M' misleading start, 'J' junction (open). Lines starting with ';' are
// comments; an optional "horizon <n>" line overrides the default horizon.
GridWorld parse_maze(std::string_view text);
GridWorld load_maze(const std::filesystem::path& path);

// The fixed 12x12 layout shipped in data/canonical_maze.txt.
GridWorld canonical_maze();
std::string_view canonical_maze_text();

MazeState step(const GridWorld& world, const MazeState& state, Action action);

// Samples moves from `policy` (keyed by cell index) until the goal is reached
// or the horizon is spent.
Trajectory rollout(const GridWorld& world, const PolicyTable& policy,
                   const MazeState& start, Rng& rng);

}  // namespace gasp
