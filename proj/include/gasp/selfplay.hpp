#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "gasp/grpo.hpp"
#include "gasp/guidance.hpp"
#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"

namespace gasp {

inline constexpr std::array<double, 4> kTruncationFractions = {0.0, 0.25, 0.5,
                                                               0.75};

bool is_truncation_fraction(double alpha);

// ceil(0.1 * rail_length), at least 1.
std::size_t window_length(std::size_t rail_length);
// floor(alpha * rail_length).
std::size_t truncation_index(double alpha, std::size_t rail_length);

struct CorruptionWindow {
  double truncation_fraction = 0.0;
  std::vector<Action> moves;
};

struct PollutedStart {
  std::size_t rail_id = 0;
  std::size_t truncation_index = 0;
  CorruptionWindow window;
  MazeState truncation_state;
  MazeState resolved_state;
  int remaining_horizon = 0;
};

// Polluter head: its own table, keyed by (truncation cell, window position).
class PolluterPolicy {
 public:
  PolluterPolicy() = default;
  PolluterPolicy(const GridWorld& world, std::size_t window_length,
                 double temperature = 1.0);

  std::size_t window_length() const { return window_length_; }
  std::size_t key(std::size_t cell_index, std::size_t position) const;
  const PolicyTable& table() const { return table_; }
  PolicyTable& table() { return table_; }

  bool operator==(const PolluterPolicy&) const = default;

 private:
  std::size_t window_length_ = 0;
  PolicyTable table_;
};

// Walks `rail` to floor(alpha * length) and then applies the window moves.
PollutedStart make_polluted_start(const GridWorld& world,
                                  const Trajectory& rail, double alpha,
                                  const CorruptionWindow& window,
                                  std::size_t rail_id = 0);

// The rail's own next m moves after the truncation point.
CorruptionWindow clean_window(const Trajectory& rail, double alpha,
                              std::size_t m);

CorruptionWindow sample_corruption(const PolluterPolicy& polluter,
                                   const GridWorld& world,
                                   const MazeState& truncation_state,
                                   double alpha, std::size_t m, Rng& rng);

// Polluter tokens of a window sampled at `truncation_state`.
std::vector<Decision> window_decisions(const PolluterPolicy& polluter,
                                       const GridWorld& world,
                                       const MazeState& truncation_state,
                                       const CorruptionWindow& window);

constexpr int polluter_reward(int agent_success) { return 1 - agent_success; }

struct WindowOutcome {
  PollutedStart start;
  int agent_success = 0;
};

// n windows from one truncation context, one agent rollout per window.
// Item i draws its window and its rollout from streams derived from
// (base_seed, i), so both kernels agree exactly.
std::vector<WindowOutcome> window_outcomes_serial(
    const GridWorld& world, const PolicyTable& agent,
    const PolluterPolicy& polluter, const Trajectory& rail, double alpha,
    std::size_t n, std::uint64_t base_seed, std::size_t rail_id = 0);
std::vector<WindowOutcome> window_outcomes_parallel(
    const GridWorld& world, const PolicyTable& agent,
    const PolluterPolicy& polluter, const Trajectory& rail, double alpha,
    std::size_t n, std::uint64_t base_seed, std::size_t rail_id = 0);

struct PolluterStepResult {
  PolluterPolicy polluter;
  GrpoStats stats;
  TrajectoryGroup group;  // tokens are windows, rewards are R^poll
  std::vector<WindowOutcome> outcomes;
};

// One GRPO ascent step of the polluter head on R^poll = 1 - r_solve. The
// agent is only rolled out, never differentiated.
PolluterStepResult polluter_step(const PolluterPolicy& polluter,
                                 const PolicyTable& agent,
                                 const GridWorld& world, const Trajectory& rail,
                                 double alpha, std::size_t g_poll,
                                 double clip_eps, double lr, Rng& rng,
                                 std::size_t rail_id = 0);

enum class PolluterMode { kAdaptive, kFrozen, kIdentity };

std::string_view to_string(PolluterMode mode);
PolluterMode polluter_mode_from_string(std::string_view name);

enum class Role { kAgent, kPolluter };

// Blocked schedule: block_size agent steps, then block_size polluter steps.
Role role_at(std::size_t step, std::size_t block_size);

// Fixed evaluation starts: the misleading start plus the recoverable polluted
// starts (goal still reachable in the remaining horizon) that are hardest for
// the base policy on a reference rail.
struct EvalSuite {
  std::vector<MazeState> starts;
  std::vector<double> base_success;
};

EvalSuite build_eval_suite(const GridWorld& world, const PolicyTable& base,
                           const Trajectory& reference_rail, std::size_t count,
                           std::size_t rollouts_per_start,
                           std::uint64_t seed);

double evaluate_suite(const GridWorld& world, const PolicyTable& agent,
                      const EvalSuite& suite, std::size_t rollouts_per_start,
                      std::uint64_t seed);

struct SelfPlayConfig {
  std::size_t blocks = 60;  // one block = block_size agent + block_size polluter steps
  std::size_t block_size = 5;
  std::size_t group_size = 16;
  std::size_t polluter_group_size = 16;
  double clip_eps = kDefaultClipEps;
  double lr_agent = 5.0;
  double lr_polluter = 5.0;
  GuidanceConfig guidance;
  PolluterMode mode = PolluterMode::kAdaptive;
  std::size_t eval_rollouts = 10;  // per eval-suite start, once per block
};

void validate(const SelfPlayConfig& config);

struct SelfPlayStep {
  std::size_t step = 0;
  Role role = Role::kAgent;
  double alpha = 0.0;
  std::size_t rail_id = 0;
  std::size_t k = 0;
  std::size_t group_size = 0;
  double polluter_win_rate = 0.0;
  double agent_recovery_rate = 0.0;
  double gradient_norm = 0.0;
  double guide_grad_norm = 0.0;
  double lambda = 0.0;
  std::size_t buffer_size = 0;
};

struct SelfPlayBlock {
  std::size_t block = 0;
  std::size_t end_step = 0;
  double polluter_win_rate = 0.0;
  double agent_recovery_rate = 0.0;
  double eval_recovery = 0.0;
};

struct SelfPlayHistory {
  std::vector<SelfPlayStep> steps;
  std::vector<SelfPlayBlock> blocks;  // blocks[0] is the initial evaluation
  PolicyTable agent;
  PolluterPolicy polluter;
};

// Blocked alternation of guided agent steps on polluted starts and polluter
// GRPO steps. `rails` are successful clean-start rollouts of `base`.
SelfPlayHistory alternate_train(const GridWorld& world, const PolicyTable& base,
                                const RailSet& rail_set,
                                std::span<const Trajectory> rails,
                                const EvalSuite& suite,
                                const SelfPlayConfig& config,
                                std::uint64_t seed);

}  // namespace gasp
