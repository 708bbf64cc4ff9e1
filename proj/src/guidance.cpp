#include "gasp/guidance.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "gasp/error.hpp"
#include "gasp/kernels.hpp"

namespace gasp {

namespace {

constexpr std::uint64_t kMinibatchStream = 0x6d696e6962617463ULL;

}  // namespace

RailSet::RailSet(const GridWorld& world, std::span<const Cell> cells)
    : width_(world.width()), member_(world.num_cells(), false) {
  for (Cell c : cells) {
    require(world.in_bounds(c), "rail cell out of bounds");
    const auto i = world.index(c);
    if (!member_[i]) {
      member_[i] = true;
      ++count_;
    }
  }
}

bool RailSet::contains(Cell c) const {
  if (c.row < 0 || c.col < 0 || c.col >= width_) return false;
  const auto i = static_cast<std::size_t>(c.row) * static_cast<std::size_t>(width_) +
                 static_cast<std::size_t>(c.col);
  return i < member_.size() && member_[i];
}

std::vector<Cell> RailSet::cells() const {
  std::vector<Cell> out;
  for (std::size_t i = 0; i < member_.size(); ++i) {
    if (member_[i]) {
      out.push_back({static_cast<int>(i / static_cast<std::size_t>(width_)),
                     static_cast<int>(i % static_cast<std::size_t>(width_))});
    }
  }
  return out;
}

std::size_t RailSet::difference(const RailSet& other) const {
  require(member_.size() == other.member_.size(), "rail sets from different mazes");
  std::size_t d = 0;
  for (std::size_t i = 0; i < member_.size(); ++i) d += member_[i] != other.member_[i];
  return d;
}

std::vector<Decision> RepairSegment::decisions(const GridWorld& world) const {
  std::vector<Decision> out;
  out.reserve(actions.size());
  for (std::size_t t = 0; t < actions.size(); ++t) {
    out.push_back({world.index(states[t].cell), actions[t]});
  }
  return out;
}

RepairBuffer::RepairBuffer(std::size_t capacity) : capacity_(capacity) {
  require(capacity_ > 0, "repair buffer capacity must be positive");
}

void RepairBuffer::push(RepairSegment segment) {
  if (segments_.size() == capacity_) segments_.pop_front();
  segments_.push_back(std::move(segment));
}

std::vector<RepairSegment> RepairBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> order(segments_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(n, order.size());
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, order.size() - i));
    std::swap(order[i], order[j]);
  }
  std::vector<RepairSegment> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(segments_[order[i]]);
  return out;
}

void validate(const GuidanceConfig& config) {
  require(config.lambda0 >= 0.0, "guidance: lambda0 must be non-negative");
  require(config.anneal_start_fraction >= 0.0 && config.anneal_start_fraction <= 1.0,
          "guidance: anneal_start_fraction must be in [0, 1]");
  require(config.minibatch_size > 0, "guidance: minibatch_size must be positive");
  require(config.buffer_capacity > 0, "guidance: buffer_capacity must be positive");
}

RailSet compute_rail(const GridWorld& world, const PolicyTable& base_policy,
                     Cell clean_start, std::size_t n_rollouts, Rng& rng) {
  require(n_rollouts > 0, "compute_rail: need at least one rollout");
  const std::vector<MazeState> starts(n_rollouts, MazeState{clean_start, 0});
  const auto trajectories =
      kernels::rollout_batch_parallel(world, base_policy, starts, rng());
  std::vector<Cell> cells;
  std::size_t successes = 0;
  for (const Trajectory& t : trajectories) {
    if (t.reward != 1) continue;
    ++successes;
    for (const MazeState& s : t.states) cells.push_back(s.cell);
  }
  require(successes > 0,
          "compute_rail: base policy never reached the goal from the clean start",
          ErrorCode::kUnfitPolicy);
  return RailSet(world, cells);
}

std::optional<RepairSegment> harvest_repair(const Trajectory& trajectory,
                                            const RailSet& rail) {
  require(!rail.contains(trajectory.start.cell),
          "harvest_repair: trajectory starts on the rail");
  for (std::size_t t = 0; t < trajectory.moves.size(); ++t) {
    if (!rail.contains(trajectory.states[t + 1].cell)) continue;
    RepairSegment seg;
    seg.states.assign(trajectory.states.begin(),
                      trajectory.states.begin() + static_cast<std::ptrdiff_t>(t + 1));
    seg.actions.assign(trajectory.moves.begin(),
                       trajectory.moves.begin() + static_cast<std::ptrdiff_t>(t + 1));
    seg.rail_entry = trajectory.states[t + 1].cell;
    return seg;
  }
  return std::nullopt;
}

double segment_log_likelihood(const PolicyTable& policy, const GridWorld& world,
                              const RepairSegment& segment) {
  const auto decisions = segment.decisions(world);
  return sequence_log_prob(policy, decisions);
}

ScoreGradient guide_gradient(const PolicyTable& policy, const GridWorld& world,
                             std::span<const RepairSegment> minibatch) {
  ScoreGradient g;
  if (minibatch.empty()) return g;
  for (const RepairSegment& seg : minibatch) {
    const auto decisions = seg.decisions(world);
    g.accumulate(sequence_score(policy, decisions));
  }
  g.scale(1.0 / static_cast<double>(minibatch.size()));
  return g;
}

namespace {

GuidedStepResult combine(const PolicyTable& policy, TrajectoryGroup group,
                         GrpoGradient grpo, const ScoreGradient* guide,
                         double lambda, double lr) {
  GuidedStepResult out;
  out.stats.grpo = grpo.stats;
  out.stats.lambda = lambda;
  ScoreGradient total = std::move(grpo.gradient);
  if (guide != nullptr && lambda != 0.0) {
    out.stats.guide_grad_norm = guide->norm();
    total.accumulate(*guide, lambda);
  }
  out.policy = apply_update(policy, total, lr);
  out.group = std::move(group);
  return out;
}

}  // namespace

GuidedStepResult guided_step(const PolicyTable& policy, const GridWorld& world,
                             const MazeState& context, std::size_t g,
                             double clip_eps, RepairBuffer& buffer,
                             const RailSet& rail, double lambda, double lr,
                             std::size_t minibatch_size, std::size_t step_index,
                             Rng& rng) {
  require(lambda >= 0.0, "guided_step: lambda must be non-negative");
  Rng peek = rng;
  const std::uint64_t group_seed = peek();

  TrajectoryGroup group = sample_group(world, policy, context, g, rng);
  normalize(group);
  GrpoGradient grpo = grpo_gradient(policy, policy, group, clip_eps);

  std::size_t harvested = 0;
  if (!rail.contains(context.cell)) {
    for (const Trajectory& t : group.trajectories) {
      auto seg = harvest_repair(t, rail);
      if (!seg) continue;
      seg->harvest_step = step_index;
      seg->harvest_log_likelihood = segment_log_likelihood(policy, world, *seg);
      buffer.push(std::move(*seg));
      ++harvested;
    }
  }

  std::optional<ScoreGradient> guide;
  if (lambda > 0.0 && !buffer.empty()) {
    Rng mb_rng(derive_seed(group_seed, kMinibatchStream));
    const auto minibatch = buffer.sample(minibatch_size, mb_rng);
    guide = guide_gradient(policy, world, minibatch);
  }
  GuidedStepResult out = combine(policy, std::move(group), std::move(grpo),
                                 guide ? &*guide : nullptr, lambda, lr);
  out.stats.harvested = harvested;
  out.stats.buffer_size = buffer.size();
  return out;
}

GuidedStepResult fixed_target_step(const PolicyTable& policy,
                                   const GridWorld& world,
                                   const MazeState& context, std::size_t g,
                                   double clip_eps,
                                   std::span<const RepairSegment> targets,
                                   double lambda, double lr, Rng& rng) {
  require(lambda >= 0.0, "fixed_target_step: lambda must be non-negative");
  TrajectoryGroup group = sample_group(world, policy, context, g, rng);
  normalize(group);
  GrpoGradient grpo = grpo_gradient(policy, policy, group, clip_eps);
  std::optional<ScoreGradient> guide;
  if (lambda > 0.0 && !targets.empty()) guide = guide_gradient(policy, world, targets);
  GuidedStepResult out = combine(policy, std::move(group), std::move(grpo),
                                 guide ? &*guide : nullptr, lambda, lr);
  out.stats.buffer_size = targets.size();
  return out;
}

double lambda_schedule(std::size_t step, std::size_t total_steps,
                       const GuidanceConfig& config) {
  require(step <= total_steps, "lambda_schedule: step beyond total_steps");
  if (total_steps == 0) return config.lambda0;
  const double start = config.anneal_start_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < start) return config.lambda0;
  const double span = static_cast<double>(total_steps) - start;
  if (span <= 0.0) return 0.0;
  return config.lambda0 * (static_cast<double>(total_steps) - s) / span;
}

void save_buffer(const std::filesystem::path& path, const RepairBuffer& buffer) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string(), ErrorCode::kIo);
  out << "harvest_step\tlog_likelihood\tstart_row\tstart_col\tentry_row\tentry_col\tmoves\n";
  for (const RepairSegment& seg : buffer.segments()) {
    out << seg.harvest_step << '\t' << seg.harvest_log_likelihood << '\t'
        << seg.states.front().cell.row << '\t' << seg.states.front().cell.col << '\t'
        << seg.rail_entry.row << '\t' << seg.rail_entry.col << '\t';
    for (std::size_t t = 0; t < seg.actions.size(); ++t) {
      out << (t ? "," : "") << action_name(seg.actions[t]);
    }
    out << '\n';
  }
}

}  // namespace gasp
