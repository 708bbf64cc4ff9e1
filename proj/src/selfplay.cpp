#include "gasp/selfplay.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "gasp/error.hpp"
#include "gasp/kernels.hpp"

namespace gasp {

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616c75617465ULL;

WindowOutcome window_outcome(const GridWorld& world, const PolicyTable& agent,
                             const PolluterPolicy& polluter,
                             const Trajectory& rail, double alpha,
                             std::size_t rail_id, std::uint64_t base_seed,
                             std::size_t i) {
  const std::size_t t = truncation_index(alpha, rail.length());
  Rng window_rng(derive_seed(base_seed, 2 * i));
  Rng agent_rng(derive_seed(base_seed, 2 * i + 1));
  const CorruptionWindow window =
      sample_corruption(polluter, world, rail.states[t], alpha,
                        polluter.window_length(), window_rng);
  WindowOutcome out;
  out.start = make_polluted_start(world, rail, alpha, window, rail_id);
  out.agent_success = rollout(world, agent, out.start.resolved_state, agent_rng).reward;
  return out;
}

}  // namespace

bool is_truncation_fraction(double alpha) {
  return std::find(kTruncationFractions.begin(), kTruncationFractions.end(),
                   alpha) != kTruncationFractions.end();
}

std::size_t window_length(std::size_t rail_length) {
  const auto m = static_cast<std::size_t>(
      std::ceil(0.1 * static_cast<double>(rail_length) - 1e-12));
  return std::max<std::size_t>(m, 1);
}

std::size_t truncation_index(double alpha, std::size_t rail_length) {
  require(alpha >= 0.0 && alpha < 1.0, "truncation fraction must be in [0, 1)");
  return static_cast<std::size_t>(std::floor(alpha * static_cast<double>(rail_length)));
}

PolluterPolicy::PolluterPolicy(const GridWorld& world, std::size_t window_length,
                               double temperature)
    : window_length_(window_length),
      table_(world.num_cells() * window_length, temperature) {
  require(window_length > 0, "polluter: window length must be positive");
}

std::size_t PolluterPolicy::key(std::size_t cell_index, std::size_t position) const {
  require(position < window_length_, "polluter: window position out of range");
  return cell_index * window_length_ + position;
}

PollutedStart make_polluted_start(const GridWorld& world,
                                  const Trajectory& rail, double alpha,
                                  const CorruptionWindow& window,
                                  std::size_t rail_id) {
  require(rail.reward == 1, "make_polluted_start: rail trajectory misses the goal");
  require(is_truncation_fraction(alpha),
          "make_polluted_start: alpha must be one of 0, 0.25, 0.5, 0.75");
  require(!window.moves.empty(), "make_polluted_start: empty window");
  PollutedStart out;
  out.rail_id = rail_id;
  out.truncation_index = truncation_index(alpha, rail.length());
  out.window = window;
  out.window.truncation_fraction = alpha;
  out.truncation_state = rail.states[out.truncation_index];
  const int budget = world.horizon() - out.truncation_state.steps_taken;
  require(static_cast<int>(window.moves.size()) <= budget,
          "make_polluted_start: window of " + std::to_string(window.moves.size()) +
              " moves exceeds the remaining horizon " + std::to_string(budget));
  MazeState s = out.truncation_state;
  for (Action a : window.moves) s = step(world, s, a);
  out.resolved_state = s;
  out.remaining_horizon = world.horizon() - s.steps_taken;
  return out;
}

CorruptionWindow clean_window(const Trajectory& rail, double alpha, std::size_t m) {
  const std::size_t t = truncation_index(alpha, rail.length());
  require(t + m <= rail.length(), "clean_window: rail too short for the window");
  CorruptionWindow w;
  w.truncation_fraction = alpha;
  w.moves.assign(rail.moves.begin() + static_cast<std::ptrdiff_t>(t),
                 rail.moves.begin() + static_cast<std::ptrdiff_t>(t + m));
  return w;
}

CorruptionWindow sample_corruption(const PolluterPolicy& polluter,
                                   const GridWorld& world,
                                   const MazeState& truncation_state,
                                   double alpha, std::size_t m, Rng& rng) {
  require(m >= 1 && m <= polluter.window_length(),
          "sample_corruption: window length out of range");
  const std::size_t cell = world.index(truncation_state.cell);
  CorruptionWindow w;
  w.truncation_fraction = alpha;
  w.moves.reserve(m);
  for (std::size_t pos = 0; pos < m; ++pos) {
    w.moves.push_back(polluter.table().sample(polluter.key(cell, pos), rng));
  }
  return w;
}

std::vector<Decision> window_decisions(const PolluterPolicy& polluter,
                                       const GridWorld& world,
                                       const MazeState& truncation_state,
                                       const CorruptionWindow& window) {
  const std::size_t cell = world.index(truncation_state.cell);
  std::vector<Decision> out;
  out.reserve(window.moves.size());
  for (std::size_t pos = 0; pos < window.moves.size(); ++pos) {
    out.push_back({polluter.key(cell, pos), window.moves[pos]});
  }
  return out;
}

std::vector<WindowOutcome> window_outcomes_serial(
    const GridWorld& world, const PolicyTable& agent,
    const PolluterPolicy& polluter, const Trajectory& rail, double alpha,
    std::size_t n, std::uint64_t base_seed, std::size_t rail_id) {
  std::vector<WindowOutcome> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = window_outcome(world, agent, polluter, rail, alpha, rail_id, base_seed, i);
  }
  return out;
}

std::vector<WindowOutcome> window_outcomes_parallel(
    const GridWorld& world, const PolicyTable& agent,
    const PolluterPolicy& polluter, const Trajectory& rail, double alpha,
    std::size_t n, std::uint64_t base_seed, std::size_t rail_id) {
  // Validate once up front so no exception escapes the parallel region.
  if (n > 0) {
    window_outcome(world, agent, polluter, rail, alpha, rail_id, base_seed, 0);
  }
  std::vector<WindowOutcome> out(n);
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (count >= 8)
  for (std::int64_t i = 0; i < count; ++i) {
    const auto u = static_cast<std::size_t>(i);
    out[u] = window_outcome(world, agent, polluter, rail, alpha, rail_id, base_seed, u);
  }
  return out;
}

PolluterStepResult polluter_step(const PolluterPolicy& polluter,
                                 const PolicyTable& agent,
                                 const GridWorld& world, const Trajectory& rail,
                                 double alpha, std::size_t g_poll,
                                 double clip_eps, double lr, Rng& rng,
                                 std::size_t rail_id) {
  require(g_poll >= 2, "polluter_step: group size must be at least 2");
  PolluterStepResult out;
  out.outcomes = window_outcomes_parallel(world, agent, polluter, rail, alpha,
                                          g_poll, rng(), rail_id);
  TrajectoryGroup& group = out.group;
  group.context = out.outcomes.front().start.truncation_state;
  for (const WindowOutcome& o : out.outcomes) {
    group.tokens.push_back(
        window_decisions(polluter, world, o.start.truncation_state, o.start.window));
    group.rewards.push_back(static_cast<double>(polluter_reward(o.agent_success)));
  }
  normalize(group);
  GrpoGradient grad = grpo_gradient(polluter.table(), polluter.table(), group, clip_eps);
  out.stats = grad.stats;
  out.polluter = polluter;
  apply_update_in_place(out.polluter.table(), grad.gradient, lr);
  return out;
}

std::string_view to_string(PolluterMode mode) {
  switch (mode) {
    case PolluterMode::kAdaptive: return "adaptive";
    case PolluterMode::kFrozen: return "frozen";
    case PolluterMode::kIdentity: return "identity";
  }
  return "?";
}

PolluterMode polluter_mode_from_string(std::string_view name) {
  if (name == "adaptive") return PolluterMode::kAdaptive;
  if (name == "frozen") return PolluterMode::kFrozen;
  if (name == "identity") return PolluterMode::kIdentity;
  fail(ErrorCode::kInvalidArgument, "unknown polluter mode '" + std::string(name) + "'");
}

Role role_at(std::size_t step, std::size_t block_size) {
  require(block_size > 0, "role_at: block size must be positive");
  return (step / block_size) % 2 == 0 ? Role::kAgent : Role::kPolluter;
}

EvalSuite build_eval_suite(const GridWorld& world, const PolicyTable& base,
                           const Trajectory& reference_rail, std::size_t count,
                           std::size_t rollouts_per_start, std::uint64_t seed) {
  require(rollouts_per_start > 0, "eval suite: need rollouts per start");
  const std::size_t m = window_length(reference_rail.length());
  require(m <= 3, "eval suite: window too long to enumerate");
  std::size_t n_windows = 1;
  for (std::size_t i = 0; i < m; ++i) n_windows *= kNumActions;

  std::map<MazeState, double> hardness;
  for (double alpha : kTruncationFractions) {
    for (std::size_t code = 0; code < n_windows; ++code) {
      CorruptionWindow w;
      std::size_t c = code;
      for (std::size_t i = 0; i < m; ++i) {
        w.moves.push_back(action_from_index(c % kNumActions));
        c /= kNumActions;
      }
      const MazeState s = make_polluted_start(world, reference_rail, alpha, w).resolved_state;
      if (hardness.contains(s) || s.cell == world.goal()) continue;
      const auto togo = world.shortest_path(s.cell, world.goal());
      if (!togo || s.steps_taken + *togo > world.horizon()) continue;
      const std::uint64_t sseed = derive_seed(seed, hardness.size());
      hardness[s] = static_cast<double>(kernels::count_successes_parallel(
                        world, base, s, rollouts_per_start, sseed)) /
                    static_cast<double>(rollouts_per_start);
    }
  }
  std::vector<std::pair<double, MazeState>> ranked;
  for (const auto& [s, p] : hardness) ranked.push_back({p, s});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  EvalSuite suite;
  if (world.landmarks().misleading_start) {
    const MazeState mis{world.misleading_start(), 0};
    suite.starts.push_back(mis);
    suite.base_success.push_back(
        static_cast<double>(kernels::count_successes_parallel(
            world, base, mis, rollouts_per_start, derive_seed(seed, kEvalStream))) /
        static_cast<double>(rollouts_per_start));
  }
  for (std::size_t i = 0; i < ranked.size() && i < count; ++i) {
    suite.starts.push_back(ranked[i].second);
    suite.base_success.push_back(ranked[i].first);
  }
  return suite;
}

double evaluate_suite(const GridWorld& world, const PolicyTable& agent,
                      const EvalSuite& suite, std::size_t rollouts_per_start,
                      std::uint64_t seed) {
  require(!suite.starts.empty(), "evaluate_suite: empty suite");
  require(rollouts_per_start > 0, "evaluate_suite: need rollouts per start");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < suite.starts.size(); ++i) {
    hits += kernels::count_successes_parallel(world, agent, suite.starts[i],
                                              rollouts_per_start, derive_seed(seed, i));
  }
  return static_cast<double>(hits) /
         static_cast<double>(rollouts_per_start * suite.starts.size());
}

void validate(const SelfPlayConfig& c) {
  require(c.block_size > 0, "selfplay: block_size must be positive");
  require(c.group_size >= 2, "selfplay: group size must be at least 2");
  require(c.polluter_group_size >= 2, "selfplay: polluter group size must be at least 2");
  require(c.clip_eps > 0.0 && c.clip_eps < 1.0, "selfplay: clip_eps must be in (0, 1)");
  require(std::isfinite(c.lr_agent) && c.lr_agent >= 0.0, "selfplay: bad lr_agent");
  require(std::isfinite(c.lr_polluter) && c.lr_polluter >= 0.0, "selfplay: bad lr_polluter");
  require(c.eval_rollouts > 0, "selfplay: eval_rollouts must be positive");
  validate(c.guidance);
}

SelfPlayHistory alternate_train(const GridWorld& world, const PolicyTable& base,
                                const RailSet& rail_set,
                                std::span<const Trajectory> rails,
                                const EvalSuite& suite,
                                const SelfPlayConfig& config,
                                std::uint64_t seed) {
  validate(config);
  require(!rails.empty(), "selfplay: no rail trajectories");
  for (const Trajectory& r : rails) {
    require(r.reward == 1 && r.start.cell == world.clean_start(),
            "selfplay: rail trajectories must be clean-start successes",
            ErrorCode::kUnfitPolicy);
  }
  const std::size_t m = window_length(rails.front().length());
  for (const Trajectory& r : rails) {
    require(truncation_index(kTruncationFractions.back(), r.length()) + m <= r.length(),
            "selfplay: rail trajectory too short for the window", ErrorCode::kUnfitPolicy);
  }

  SelfPlayHistory h;
  h.agent = base;
  h.polluter = PolluterPolicy(world, m, base.temperature());
  RepairBuffer buffer(config.guidance.buffer_capacity);
  Rng rng(seed);
  const std::uint64_t eval_seed = derive_seed(seed, kEvalStream);

  const std::size_t block_steps = 2 * config.block_size;
  const std::size_t total_steps = config.blocks * block_steps;
  const std::size_t total_agent_steps = config.blocks * config.block_size;
  std::size_t agent_steps = 0;

  h.blocks.push_back({0, 0, 0.0, 0.0,
                      evaluate_suite(world, h.agent, suite, config.eval_rollouts,
                                     derive_seed(eval_seed, 0))});
  std::size_t block_hits = 0;
  std::size_t block_rollouts = 0;

  for (std::size_t s = 0; s < total_steps; ++s) {
    SelfPlayStep rec;
    rec.step = s;
    rec.role = role_at(s, config.block_size);
    Rng ctx(rng());
    rec.rail_id = static_cast<std::size_t>(uniform_index(ctx, rails.size()));
    rec.alpha = kTruncationFractions[uniform_index(ctx, kTruncationFractions.size())];
    const Trajectory& rail = rails[rec.rail_id];

    if (rec.role == Role::kAgent) {
      const std::size_t t = truncation_index(rec.alpha, rail.length());
      const CorruptionWindow window =
          config.mode == PolluterMode::kIdentity
              ? clean_window(rail, rec.alpha, m)
              : sample_corruption(h.polluter, world, rail.states[t], rec.alpha, m, ctx);
      const PollutedStart start = make_polluted_start(world, rail, rec.alpha, window, rec.rail_id);
      rec.lambda = lambda_schedule(agent_steps, total_agent_steps, config.guidance);
      GuidedStepResult r = guided_step(h.agent, world, start.resolved_state,
                                       config.group_size, config.clip_eps, buffer,
                                       rail_set, rec.lambda, config.lr_agent,
                                       config.guidance.minibatch_size, agent_steps, rng);
      h.agent = std::move(r.policy);
      ++agent_steps;
      rec.k = r.stats.grpo.k;
      rec.group_size = r.stats.grpo.group_size;
      rec.gradient_norm = r.stats.grpo.gradient_norm;
      rec.guide_grad_norm = r.stats.guide_grad_norm;
      rec.buffer_size = r.stats.buffer_size;
    } else {
      std::size_t successes = 0;
      if (config.mode == PolluterMode::kAdaptive) {
        PolluterStepResult r = polluter_step(h.polluter, h.agent, world, rail, rec.alpha,
                                             config.polluter_group_size, config.clip_eps,
                                             config.lr_polluter, rng, rec.rail_id);
        h.polluter = std::move(r.polluter);
        for (const auto& o : r.outcomes) successes += static_cast<std::size_t>(o.agent_success);
        rec.gradient_norm = r.stats.gradient_norm;
      } else {
        // No polluter update; the windows are still played for the record.
        const std::uint64_t base_seed = rng();
        if (config.mode == PolluterMode::kIdentity) {
          const MazeState st = make_polluted_start(
              world, rail, rec.alpha, clean_window(rail, rec.alpha, m)).resolved_state;
          successes = kernels::count_successes_parallel(
              world, h.agent, st, config.polluter_group_size, base_seed);
        } else {
          for (const auto& o : window_outcomes_parallel(
                   world, h.agent, h.polluter, rail, rec.alpha,
                   config.polluter_group_size, base_seed, rec.rail_id)) {
            successes += static_cast<std::size_t>(o.agent_success);
          }
        }
      }
      rec.k = config.polluter_group_size - successes;
      rec.group_size = config.polluter_group_size;
      rec.buffer_size = buffer.size();
    }
    const std::size_t agent_wins =
        rec.role == Role::kAgent ? rec.k : rec.group_size - rec.k;
    rec.agent_recovery_rate =
        static_cast<double>(agent_wins) / static_cast<double>(rec.group_size);
    rec.polluter_win_rate = 1.0 - rec.agent_recovery_rate;
    block_hits += agent_wins;
    block_rollouts += rec.group_size;
    h.steps.push_back(rec);

    if ((s + 1) % block_steps == 0) {
      SelfPlayBlock b;
      b.block = (s + 1) / block_steps;
      b.end_step = s + 1;
      b.agent_recovery_rate =
          static_cast<double>(block_hits) / static_cast<double>(block_rollouts);
      b.polluter_win_rate = 1.0 - b.agent_recovery_rate;
      b.eval_recovery = evaluate_suite(world, h.agent, suite, config.eval_rollouts,
                                       derive_seed(eval_seed, b.block));
      h.blocks.push_back(b);
      block_hits = 0;
      block_rollouts = 0;
    }
  }
  return h;
}

}  // namespace gasp
