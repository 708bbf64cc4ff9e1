#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"
#include "gasp/random.hpp"

namespace gasp {

inline constexpr double kDefaultAdvantageEps = 1e-8;
inline constexpr double kDefaultClipEps = 0.2;

// G rollouts that share one conditioning context. `tokens[i]` is the token
// sequence the policy emitted for member i; `trajectories` is filled for
// agent groups and left empty for polluter window groups.
struct TrajectoryGroup {
  MazeState context;
  std::vector<Trajectory> trajectories;
  std::vector<std::vector<Decision>> tokens;
  std::vector<double> rewards;
  std::optional<std::vector<double>> advantages;
  double eps_norm = kDefaultAdvantageEps;

  std::size_t group_size() const { return rewards.size(); }
  std::size_t successes() const;
};

struct GrpoStats {
  std::size_t k = 0;
  std::size_t group_size = 0;
  double mean_reward = 0.0;
  // a_k, b_k, c_k of the binary closed form; zero for degenerate groups.
  double a_k = 0.0;
  double b_k = 0.0;
  double c_k = 0.0;
  double gradient_norm = 0.0;
  double clipped_fraction = 0.0;
};

struct BinaryAdvantages {
  double a_k;  // advantage of every success
  double b_k;  // advantage of every failure
  double c_k;  // scale in g = c_k (mean S_success - mean S_failure)
};

// (R_i - mean) / (population std + eps).
std::vector<double> group_advantages(std::span<const double> rewards,
                                     double eps_norm = kDefaultAdvantageEps);

// Closed form for k successes among G binary rewards. Throws
// ErrorCode::kDegenerateGroup when k is 0 or G.
BinaryAdvantages binary_advantages_closed_form(std::size_t k, std::size_t g);

// Fills advantages from rewards.
void normalize(TrajectoryGroup& group);

// G independent rollouts of `policy` from `context`. Member seeds derive from
// a single draw of `rng`.
TrajectoryGroup sample_group(const GridWorld& world, const PolicyTable& policy,
                             const MazeState& context, std::size_t g, Rng& rng);
// Same group, computed by the serial reference kernel.
TrajectoryGroup sample_group_serial(const GridWorld& world,
                                    const PolicyTable& policy,
                                    const MazeState& context, std::size_t g,
                                    Rng& rng);

struct GrpoGradient {
  ScoreGradient gradient;
  GrpoStats stats;
};

// Gradient of the clipped, length-normalized group surrogate at `policy`,
// with ratios taken against `old_policy` (the sampler). Tokens whose min()
// selects the clipped branch contribute nothing.
GrpoGradient grpo_gradient(const PolicyTable& policy,
                           const PolicyTable& old_policy,
                           const TrajectoryGroup& group, double clip_eps);

struct GrpoStepResult {
  PolicyTable policy;
  GrpoStats stats;
  TrajectoryGroup group;
};

GrpoStepResult grpo_step(const PolicyTable& policy, const GridWorld& world,
                         const MazeState& context, std::size_t g,
                         double clip_eps, double lr, Rng& rng);

}  // namespace gasp
