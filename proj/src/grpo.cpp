#include "gasp/grpo.hpp"

#include <cmath>
#include <numeric>

#include "gasp/error.hpp"
#include "gasp/kernels.hpp"

namespace gasp {

namespace {

enum class Kernel { kSerial, kParallel };

TrajectoryGroup sample_group_with(Kernel kernel, const GridWorld& world,
                                  const PolicyTable& policy,
                                  const MazeState& context, std::size_t g,
                                  Rng& rng) {
  require(g >= 2, "sample_group: group size must be at least 2");
  require(world.valid(context), "sample_group: invalid context state");
  const std::uint64_t seed = rng();
  const std::vector<MazeState> starts(g, context);
  TrajectoryGroup group;
  group.context = context;
  group.trajectories =
      kernel == Kernel::kParallel
          ? kernels::rollout_batch_parallel(world, policy, starts, seed)
          : kernels::rollout_batch_serial(world, policy, starts, seed);
  group.tokens.reserve(g);
  group.rewards.reserve(g);
  for (const Trajectory& t : group.trajectories) {
    group.tokens.push_back(decisions_of(world, t));
    group.rewards.push_back(static_cast<double>(t.reward));
  }
  return group;
}

}  // namespace

std::size_t TrajectoryGroup::successes() const {
  std::size_t k = 0;
  for (double r : rewards) k += r > 0.5 ? 1 : 0;
  return k;
}

std::vector<double> group_advantages(std::span<const double> rewards,
                                     double eps_norm) {
  require(rewards.size() >= 2, "group_advantages: need at least 2 rewards");
  require(eps_norm >= 0.0, "group_advantages: eps must be non-negative");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / n);
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / (std_dev + eps_norm));
  return adv;
}

BinaryAdvantages binary_advantages_closed_form(std::size_t k, std::size_t g) {
  require(g >= 2, "closed form: group size must be at least 2");
  if (k == 0 || k >= g) {
    fail(ErrorCode::kDegenerateGroup,
         "closed form: k = " + std::to_string(k) + " of G = " +
             std::to_string(g) + " has zero reward spread");
  }
  const double kk = static_cast<double>(k);
  const double gg = static_cast<double>(g);
  return {std::sqrt((gg - kk) / kk), -std::sqrt(kk / (gg - kk)),
          std::sqrt(kk * (gg - kk)) / gg};
}

void normalize(TrajectoryGroup& group) {
  group.advantages = group_advantages(group.rewards, group.eps_norm);
}

TrajectoryGroup sample_group(const GridWorld& world, const PolicyTable& policy,
                             const MazeState& context, std::size_t g,
                             Rng& rng) {
  return sample_group_with(Kernel::kParallel, world, policy, context, g, rng);
}

TrajectoryGroup sample_group_serial(const GridWorld& world,
                                    const PolicyTable& policy,
                                    const MazeState& context, std::size_t g,
                                    Rng& rng) {
  return sample_group_with(Kernel::kSerial, world, policy, context, g, rng);
}

GrpoGradient grpo_gradient(const PolicyTable& policy,
                           const PolicyTable& old_policy,
                           const TrajectoryGroup& group, double clip_eps) {
  require(group.advantages.has_value(),
          "grpo_gradient: group advantages are unset");
  require(clip_eps > 0.0 && clip_eps < 1.0,
          "grpo_gradient: clip eps must be in (0, 1)");
  const auto& adv = *group.advantages;
  const std::size_t g = group.group_size();
  require(adv.size() == g && group.tokens.size() == g,
          "grpo_gradient: group arrays disagree in size");

  GrpoGradient out;
  const double inv_g = 1.0 / static_cast<double>(g);
  const double inv_t = 1.0 / policy.temperature();
  std::size_t total_tokens = 0;
  std::size_t clipped_tokens = 0;
  for (std::size_t i = 0; i < g; ++i) {
    const auto& tokens = group.tokens[i];
    total_tokens += tokens.size();
    if (tokens.empty()) continue;
    const double weight = inv_g * adv[i] / static_cast<double>(tokens.size());
    for (const Decision& d : tokens) {
      const double log_ratio =
          policy.log_prob(d.key, d.action) - old_policy.log_prob(d.key, d.action);
      const double ratio = std::exp(log_ratio);
      const bool clipped = (adv[i] > 0.0 && ratio > 1.0 + clip_eps) ||
                           (adv[i] < 0.0 && ratio < 1.0 - clip_eps);
      if (clipped) {
        ++clipped_tokens;
        continue;
      }
      if (adv[i] == 0.0) continue;
      // d/dtheta [ratio * A] = ratio * A * grad log pi.
      const ActionRow p = policy.distribution(d.key);
      ActionRow row;
      for (std::size_t j = 0; j < kNumActions; ++j) {
        row[j] = ((j == to_index(d.action) ? 1.0 : 0.0) - p[j]) * inv_t;
      }
      out.gradient.add(d.key, row, weight * ratio);
    }
  }

  auto& s = out.stats;
  s.group_size = g;
  s.k = group.successes();
  s.mean_reward =
      std::accumulate(group.rewards.begin(), group.rewards.end(), 0.0) *
      inv_g;
  if (s.k > 0 && s.k < g) {
    const auto closed = binary_advantages_closed_form(s.k, g);
    s.a_k = closed.a_k;
    s.b_k = closed.b_k;
    s.c_k = closed.c_k;
  }
  s.gradient_norm = out.gradient.norm();
  s.clipped_fraction = total_tokens == 0
                           ? 0.0
                           : static_cast<double>(clipped_tokens) /
                                 static_cast<double>(total_tokens);
  return out;
}

GrpoStepResult grpo_step(const PolicyTable& policy, const GridWorld& world,
                         const MazeState& context, std::size_t g,
                         double clip_eps, double lr, Rng& rng) {
  TrajectoryGroup group = sample_group(world, policy, context, g, rng);
  normalize(group);
  GrpoGradient grad = grpo_gradient(policy, policy, group, clip_eps);
  return {apply_update(policy, grad.gradient, lr), grad.stats, std::move(group)};
}

}  // namespace gasp
