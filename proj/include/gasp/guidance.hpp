#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gasp/grpo.hpp"
#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"

namespace gasp {

// Cells visited by the base policy on its successful clean-start rollouts.
class RailSet {
 public:
  RailSet() = default;
  RailSet(const GridWorld& world, std::span<const Cell> cells);

  bool contains(Cell c) const;
  std::size_t size() const { return count_; }
  std::vector<Cell> cells() const;
  // Symmetric-difference size.
  std::size_t difference(const RailSet& other) const;

 private:
  int width_ = 0;
  std::vector<bool> member_;
  std::size_t count_ = 0;
};

// An on-policy maneuver from an off-rail state back onto the rail: every
// (state, action) pair up to and including the move that re-enters the rail.
struct RepairSegment {
  std::vector<MazeState> states;
  std::vector<Action> actions;
  Cell rail_entry;
  // Harvest bookkeeping.
  std::size_t harvest_step = 0;
  double harvest_log_likelihood = 0.0;

  std::size_t length() const { return actions.size(); }
  std::vector<Decision> decisions(const GridWorld& world) const;
};

// Bounded FIFO of harvested repair segments.
class RepairBuffer {
 public:
  explicit RepairBuffer(std::size_t capacity = 256);

  void push(RepairSegment segment);
  std::size_t size() const { return segments_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return segments_.empty(); }
  const std::deque<RepairSegment>& segments() const { return segments_; }

  // Up to `n` distinct segments chosen uniformly without replacement.
  std::vector<RepairSegment> sample(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<RepairSegment> segments_;
};

struct GuidanceConfig {
  double lambda0 = 0.07;
  double anneal_start_fraction = 0.5;
  std::size_t minibatch_size = 16;
  std::size_t buffer_capacity = 256;
};

void validate(const GuidanceConfig& config);

RailSet compute_rail(const GridWorld& world, const PolicyTable& base_policy,
                     Cell clean_start, std::size_t n_rollouts, Rng& rng);

// Prefix of `trajectory` through its first transition into the rail; empty
// when it never gets there. Throws if the trajectory starts on the rail.
std::optional<RepairSegment> harvest_repair(const Trajectory& trajectory,
                                            const RailSet& rail);

// Gradient of the minibatch mean of sum_t log pi(a_t | s_t).
ScoreGradient guide_gradient(const PolicyTable& policy, const GridWorld& world,
                             std::span<const RepairSegment> minibatch);

double segment_log_likelihood(const PolicyTable& policy, const GridWorld& world,
                              const RepairSegment& segment);

struct GuidedStepStats {
  GrpoStats grpo;
  double lambda = 0.0;
  std::size_t harvested = 0;
  std::size_t buffer_size = 0;
  double guide_grad_norm = 0.0;
};

struct GuidedStepResult {
  PolicyTable policy;
  GuidedStepStats stats;
  TrajectoryGroup group;
};

// One ascent step on J_GRPO + lambda * J_guide. Repairs from this step's
// off-rail rollouts are harvested before the guidance minibatch is drawn.
// The minibatch uses a stream derived from the group seed, so `rng` advances
// exactly as in grpo_step and lambda = 0 reproduces grpo_step bit for bit.
GuidedStepResult guided_step(const PolicyTable& policy, const GridWorld& world,
                             const MazeState& context, std::size_t g,
                             double clip_eps, RepairBuffer& buffer,
                             const RailSet& rail, double lambda, double lr,
                             std::size_t minibatch_size, std::size_t step_index,
                             Rng& rng);

// Same update, but the guidance term clones a fixed target list instead of
// harvested repairs (the off-distribution teacher baseline).
GuidedStepResult fixed_target_step(const PolicyTable& policy,
                                   const GridWorld& world,
                                   const MazeState& context, std::size_t g,
                                   double clip_eps,
                                   std::span<const RepairSegment> targets,
                                   double lambda, double lr, Rng& rng);

// lambda0 until anneal_start_fraction * total_steps, then linear to 0.
double lambda_schedule(std::size_t step, std::size_t total_steps,
                       const GuidanceConfig& config);

// Tab-separated dump: harvest_step, log-likelihood, rail entry, moves.
void save_buffer(const std::filesystem::path& path, const RepairBuffer& buffer);

}  // namespace gasp
