#include "gasp/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "gasp/error.hpp"
#include "gasp/kernels.hpp"

namespace gasp {

namespace {

constexpr std::uint64_t kStageOneStream = 1;
constexpr std::uint64_t kStageTwoStream = 2;
constexpr std::uint64_t kEvalStream = 3;
constexpr std::uint64_t kGateStream = 4;
constexpr std::uint64_t kFinalStream = 5;
constexpr std::uint64_t kReferenceStream = 6;
constexpr std::uint64_t kPoolStream = 7;
constexpr std::uint64_t kSuiteStream = 8;
constexpr std::uint64_t kSelfPlayStream = 9;

std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value,
                            std::string_view what) {
  fail(ErrorCode::kInvalidArgument, "config key '" + std::string(key) + "': " +
                                        std::string(what) + " (got '" +
                                        std::string(value) + "')");
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    bad_value(key, value, "expected a number");
  }
  return out;
}

std::size_t parse_count(std::string_view key, std::string_view value) {
  if (!value.empty() && value.front() == '-') bad_value(key, value, "must be non-negative");
  return parse_number<std::size_t>(key, value);
}

std::vector<std::uint64_t> parse_seeds(std::string_view key, std::string_view value) {
  std::vector<std::uint64_t> out;
  while (!value.empty()) {
    const auto comma = value.find(',');
    const std::string_view item = trim(value.substr(0, comma));
    if (item.empty()) bad_value(key, value, "empty seed");
    out.push_back(parse_number<std::uint64_t>(key, item));
    if (comma == std::string_view::npos) break;
    value = value.substr(comma + 1);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  ConfigKey key;
  Setter set;
  Getter get;
};

template <typename Member>
Field count_field(std::string_view name, std::string_view help, Member member) {
  return {{name, help},
          [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = parse_count(k, v);
          },
          [member](const ExperimentConfig& c) {
            return std::to_string(std::invoke(member, c));
          }};
}

template <typename Member>
Field real_field(std::string_view name, std::string_view help, Member member) {
  return {{name, help},
          [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = parse_number<double>(k, v);
          },
          [member](const ExperimentConfig& c) {
            return format_double(std::invoke(member, c));
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({{"maze", "maze file; empty selects the built-in canonical maze"},
                 [](ExperimentConfig& c, std::string_view, std::string_view v) { c.maze = v; },
                 [](const ExperimentConfig& c) { return c.maze; }});
    f.push_back(count_field("stage1_steps", "GRPO updates from the clean start",
                            &ExperimentConfig::stage1_steps));
    f.push_back(count_field("stage2_steps", "recovery updates from the misleading start",
                            &ExperimentConfig::stage2_steps));
    f.push_back(count_field("group_size", "agent rollouts per group (G)",
                            &ExperimentConfig::group_size));
    f.push_back(count_field("polluter_group_size", "polluter windows per group",
                            &ExperimentConfig::polluter_group_size));
    f.push_back(real_field("clip_eps", "surrogate clip range", &ExperimentConfig::clip_eps));
    f.push_back(real_field("lr_agent", "agent step size", &ExperimentConfig::lr_agent));
    f.push_back(real_field("lr_polluter", "polluter step size", &ExperimentConfig::lr_polluter));
    f.push_back(real_field("temperature", "sampling temperature", &ExperimentConfig::temperature));
    f.push_back(real_field("lambda0", "initial guidance weight",
                           [](auto& c) -> auto& { return c.guidance.lambda0; }));
    f.push_back(real_field("anneal_start_fraction", "fraction of training before lambda decays",
                           [](auto& c) -> auto& { return c.guidance.anneal_start_fraction; }));
    f.push_back(count_field("minibatch_size", "repair segments per guidance minibatch",
                            [](auto& c) -> auto& { return c.guidance.minibatch_size; }));
    f.push_back(count_field("buffer_capacity", "repair buffer capacity",
                            [](auto& c) -> auto& { return c.guidance.buffer_capacity; }));
    f.push_back(count_field("eval_every", "updates between checkpoints",
                            &ExperimentConfig::eval_every));
    f.push_back(count_field("eval_rollouts", "rollouts per start per checkpoint",
                            &ExperimentConfig::eval_rollouts));
    f.push_back({{"seeds", "comma-separated seed list"},
                 [](ExperimentConfig& c, std::string_view k, std::string_view v) {
                   c.seeds = parse_seeds(k, v);
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.seeds.size(); ++i) {
                     s += (i ? "," : "") + std::to_string(c.seeds[i]);
                   }
                   return s;
                 }});
    f.push_back({{"mode", "rail|recovery-grpo|recovery-guided|recovery-ood|selfplay|analyze"},
                 [](ExperimentConfig& c, std::string_view k, std::string_view v) {
                   try {
                     c.mode = mode_from_string(v);
                   } catch (const Error&) {
                     bad_value(k, v, "unknown mode");
                   }
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.mode)); }});
    f.push_back(real_field("stage1_threshold", "clean-start success required after stage 1",
                           &ExperimentConfig::stage1_threshold));
    f.push_back(count_field("stage1_eval_rollouts", "rollouts for the stage-1 gate",
                            &ExperimentConfig::stage1_eval_rollouts));
    f.push_back(count_field("rail_rollouts", "clean-start rollouts defining the rail",
                            &ExperimentConfig::rail_rollouts));
    f.push_back(count_field("selfplay_blocks", "agent/polluter blocks in self-play",
                            &ExperimentConfig::selfplay_blocks));
    f.push_back(count_field("block_size", "updates per role per block",
                            &ExperimentConfig::block_size));
    f.push_back({{"polluter_mode", "adaptive|frozen|identity"},
                 [](ExperimentConfig& c, std::string_view k, std::string_view v) {
                   try {
                     c.polluter_mode = polluter_mode_from_string(v);
                   } catch (const Error&) {
                     bad_value(k, v, "unknown polluter mode");
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(to_string(c.polluter_mode));
                 }});
    f.push_back(count_field("rail_pool", "clean rails the polluter corrupts",
                            &ExperimentConfig::rail_pool));
    f.push_back(count_field("eval_suite_size", "hardest polluted starts in the eval suite",
                            &ExperimentConfig::eval_suite_size));
    f.push_back(count_field("final_eval_rollouts", "rollouts for the final success estimates",
                            &ExperimentConfig::final_eval_rollouts));
    f.push_back(real_field("ood_likelihood_ratio", "minimum likelihood ratio of the ood target",
                           &ExperimentConfig::ood_likelihood_ratio));
    return f;
  }();
  return table;
}

double rate(std::size_t hits, std::size_t n) {
  return static_cast<double>(hits) / static_cast<double>(n);
}

StepRecord record(std::size_t step, const GrpoStats& g) {
  StepRecord r;
  r.step = step;
  r.k = g.k;
  r.group_size = g.group_size;
  r.mean_reward = g.mean_reward;
  r.gradient_norm = g.gradient_norm;
  r.clipped_fraction = g.clipped_fraction;
  return r;
}

StepRecord record(std::size_t step, const GuidedStepStats& s) {
  StepRecord r = record(step, s.grpo);
  r.guide_grad_norm = s.guide_grad_norm;
  r.lambda = s.lambda;
  r.buffer_size = s.buffer_size;
  r.harvested = s.harvested;
  return r;
}

Checkpoint evaluate(const GridWorld& world, const PolicyTable& policy,
                    std::size_t step, std::size_t n, std::uint64_t eval_seed) {
  Checkpoint c;
  c.step = step;
  c.misleading_success = rate(
      kernels::count_successes_parallel(world, policy, {world.misleading_start(), 0}, n,
                                        derive_seed(eval_seed, 2 * step)),
      n);
  c.clean_success = rate(
      kernels::count_successes_parallel(world, policy, {world.clean_start(), 0}, n,
                                        derive_seed(eval_seed, 2 * step + 1)),
      n);
  return c;
}

bool checkpoint_due(std::size_t step, std::size_t total, std::size_t every) {
  return step % every == 0 || step == total;
}

// Shortest route from `from` to the goal, taking the first improving action
// in kAllActions order at each cell.
std::vector<Cell> shortest_route(const GridWorld& world, Cell from) {
  std::vector<Cell> route{from};
  auto d = world.shortest_path(from, world.goal());
  require(d.has_value(), "goal unreachable", ErrorCode::kMazeTooConstrained);
  Cell c = from;
  while (c != world.goal()) {
    for (Action a : kAllActions) {
      const Cell n = world.move(c, a);
      if (n == c) continue;
      const auto dn = world.shortest_path(n, world.goal());
      if (dn && *dn == *d - 1) {
        c = n;
        d = dn;
        break;
      }
    }
    route.push_back(c);
  }
  return route;
}

void require_rate(double r, const std::string& what) {
  require(r >= 0.0 && r <= 1.0, what + " outside [0, 1]", ErrorCode::kInvariantViolation);
}

}  // namespace

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::kRail: return "rail";
    case Mode::kRecoveryGrpo: return "recovery-grpo";
    case Mode::kRecoveryGuided: return "recovery-guided";
    case Mode::kRecoveryOod: return "recovery-ood";
    case Mode::kSelfplay: return "selfplay";
    case Mode::kAnalyze: return "analyze";
  }
  return "?";
}

Mode mode_from_string(std::string_view name) {
  for (Mode m : {Mode::kRail, Mode::kRecoveryGrpo, Mode::kRecoveryGuided,
                 Mode::kRecoveryOod, Mode::kSelfplay, Mode::kAnalyze}) {
    if (to_string(m) == name) return m;
  }
  fail(ErrorCode::kInvalidArgument, "unknown mode '" + std::string(name) + "'");
}

std::string_view to_string(RecoveryMethod method) {
  switch (method) {
    case RecoveryMethod::kGrpo: return "grpo";
    case RecoveryMethod::kGuided: return "guided";
    case RecoveryMethod::kOodClone: return "ood-clone";
  }
  return "?";
}

RecoveryMethod recovery_method_from_string(std::string_view name) {
  for (RecoveryMethod m :
       {RecoveryMethod::kGrpo, RecoveryMethod::kGuided, RecoveryMethod::kOodClone}) {
    if (to_string(m) == name) return m;
  }
  fail(ErrorCode::kInvalidArgument, "unknown recovery method '" + std::string(name) + "'");
}

std::span<const ConfigKey> config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, std::string_view key, std::string_view what) {
    if (!ok) {
      fail(ErrorCode::kInvalidArgument,
           "config key '" + std::string(key) + "': " + std::string(what));
    }
  };
  check(c.group_size >= 2, "group_size", "must be at least 2");
  check(c.polluter_group_size >= 2, "polluter_group_size", "must be at least 2");
  check(c.clip_eps > 0.0 && c.clip_eps < 1.0, "clip_eps", "must be in (0, 1)");
  check(std::isfinite(c.lr_agent) && c.lr_agent > 0.0, "lr_agent", "must be finite and positive");
  check(std::isfinite(c.lr_polluter) && c.lr_polluter > 0.0, "lr_polluter",
        "must be finite and positive");
  check(std::isfinite(c.temperature) && c.temperature > 0.0, "temperature",
        "must be finite and positive");
  check(std::isfinite(c.guidance.lambda0) && c.guidance.lambda0 >= 0.0, "lambda0",
        "must be finite and non-negative");
  check(c.guidance.anneal_start_fraction >= 0.0 && c.guidance.anneal_start_fraction <= 1.0,
        "anneal_start_fraction", "must be in [0, 1]");
  check(c.guidance.minibatch_size > 0, "minibatch_size", "must be positive");
  check(c.guidance.buffer_capacity > 0, "buffer_capacity", "must be positive");
  check(c.eval_every > 0, "eval_every", "must be positive");
  check(c.eval_rollouts > 0, "eval_rollouts", "must be positive");
  check(!c.seeds.empty(), "seeds", "must list at least one seed");
  check(c.stage1_threshold >= 0.0 && c.stage1_threshold <= 1.0, "stage1_threshold",
        "must be in [0, 1]");
  check(c.stage1_eval_rollouts > 0, "stage1_eval_rollouts", "must be positive");
  check(c.rail_rollouts > 0, "rail_rollouts", "must be positive");
  check(c.block_size > 0, "block_size", "must be positive");
  check(c.rail_pool > 0, "rail_pool", "must be positive");
  check(c.final_eval_rollouts > 0, "final_eval_rollouts", "must be positive");
  check(std::isfinite(c.ood_likelihood_ratio) && c.ood_likelihood_ratio >= 1.0,
        "ood_likelihood_ratio", "must be at least 1");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos,
            "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const Field& f) { return f.key.name == key; });
    require(it != table.end(), "unknown config key '" + std::string(key) + "'");
    it->set(c, key, value);
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot read " + path.string(), ErrorCode::kIo);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const ExperimentConfig& config) {
  std::string out;
  for (const Field& f : fields()) {
    out += std::string(f.key.name) + " = " + f.get(config) + "\n";
  }
  return out;
}

GridWorld load_world(const ExperimentConfig& config) {
  return config.maze.empty() ? canonical_maze() : load_maze(config.maze);
}

SelfPlayConfig selfplay_config(const ExperimentConfig& c) {
  SelfPlayConfig s;
  s.blocks = c.selfplay_blocks;
  s.block_size = c.block_size;
  s.group_size = c.group_size;
  s.polluter_group_size = c.polluter_group_size;
  s.clip_eps = c.clip_eps;
  s.lr_agent = c.lr_agent;
  s.lr_polluter = c.lr_polluter;
  s.guidance = c.guidance;
  s.mode = c.polluter_mode;
  s.eval_rollouts = c.eval_rollouts;
  return s;
}

RailResult train_rail(const GridWorld& world, const ExperimentConfig& config,
                      std::uint64_t seed) {
  validate(config);
  RailResult out;
  out.seed = seed;
  out.policy = PolicyTable(world.num_cells(), config.temperature);
  Rng rng(derive_seed(seed, kStageOneStream));
  const std::uint64_t eval_seed = derive_seed(derive_seed(seed, kStageOneStream), kEvalStream);
  const MazeState clean{world.clean_start(), 0};
  const std::size_t total = config.stage1_steps;

  GrpoStats last;
  for (std::size_t s = 0; s <= total; ++s) {
    if (checkpoint_due(s, total, config.eval_every)) {
      Checkpoint c = evaluate(world, out.policy, s, config.eval_rollouts, eval_seed);
      c.gradient_norm = last.gradient_norm;
      out.checkpoints.push_back(c);
    }
    if (s == total) break;
    GrpoStepResult r = grpo_step(out.policy, world, clean, config.group_size,
                                 config.clip_eps, config.lr_agent, rng);
    out.policy = std::move(r.policy);
    last = r.stats;
    out.steps.push_back(record(s, r.stats));
  }

  const std::size_t n = config.stage1_eval_rollouts;
  out.clean_success = rate(kernels::count_successes_parallel(
                               world, out.policy, clean, n, derive_seed(seed, kGateStream)),
                           n);
  if (out.clean_success < config.stage1_threshold) {
    fail(ErrorCode::kStageOneFailed,
         "stage 1 (seed " + std::to_string(seed) + "): clean-start success " +
             format_double(out.clean_success) + " after " + std::to_string(total) +
             " updates is below the threshold " + format_double(config.stage1_threshold));
  }
  out.rail = compute_rail(world, out.policy, world.clean_start(), config.rail_rollouts, rng);
  return out;
}

std::vector<RepairSegment> harvest_distinct(const GridWorld& world,
                                            const PolicyTable& policy,
                                            const RailSet& rail,
                                            const MazeState& context,
                                            std::size_t n, std::uint64_t seed) {
  const std::vector<MazeState> starts(n, context);
  const auto trajectories = kernels::rollout_batch_parallel(world, policy, starts, seed);
  std::map<std::vector<Action>, RepairSegment> distinct;
  for (const Trajectory& t : trajectories) {
    if (auto seg = harvest_repair(t, rail)) distinct.emplace(seg->actions, std::move(*seg));
  }
  std::vector<RepairSegment> out;
  out.reserve(distinct.size());
  for (auto& [moves, seg] : distinct) {
    seg.harvest_log_likelihood = segment_log_likelihood(policy, world, seg);
    out.push_back(std::move(seg));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.harvest_log_likelihood > b.harvest_log_likelihood;
  });
  return out;
}

RepairSegment ood_target_for(const GridWorld& world, const RailResult& base,
                             const ExperimentConfig& config) {
  const MazeState mis{world.misleading_start(), 0};
  std::vector<RepairSegment> references;
  for (std::size_t len = 1; len <= static_cast<std::size_t>(world.horizon()); ++len) {
    references = enumerate_repairs(world, base.rail, mis, len);
    if (!references.empty()) break;
  }
  require(!references.empty(), "ood target: the rail is unreachable from the misleading start",
          ErrorCode::kMazeTooConstrained);
  for (RepairSegment& seg : harvest_distinct(world, base.policy, base.rail, mis, 1000,
                                             derive_seed(base.seed, kReferenceStream))) {
    references.push_back(std::move(seg));
  }
  OodTargetOptions options;
  options.min_likelihood_ratio = config.ood_likelihood_ratio;
  return make_ood_target(world, base.rail, base.policy, mis, references, options);
}

TrainingHistory run_recovery(const GridWorld& world, const RailResult& base,
                             RecoveryMethod method, const ExperimentConfig& config) {
  validate(config);
  require(!base.rail.contains(world.misleading_start()),
          "recovery: the misleading start lies on the rail", ErrorCode::kUnfitPolicy);
  TrainingHistory h;
  h.seed = base.seed;
  h.method = std::string(to_string(method));
  h.policy = base.policy;
  h.buffer = RepairBuffer(config.guidance.buffer_capacity);

  std::vector<RepairSegment> targets;
  if (method == RecoveryMethod::kOodClone) targets.push_back(ood_target_for(world, base, config));

  Rng rng(derive_seed(base.seed, kStageTwoStream));
  const std::uint64_t eval_seed = derive_seed(derive_seed(base.seed, kStageTwoStream), kEvalStream);
  const MazeState mis{world.misleading_start(), 0};
  const std::size_t total = config.stage2_steps;

  StepRecord last;
  for (std::size_t s = 0; s <= total; ++s) {
    if (checkpoint_due(s, total, config.eval_every)) {
      Checkpoint c = evaluate(world, h.policy, s, config.eval_rollouts, eval_seed);
      c.gradient_norm = last.gradient_norm;
      c.lambda = last.lambda;
      c.buffer_size = last.buffer_size;
      h.checkpoints.push_back(c);
    }
    if (s == total) break;
    const double lambda = method == RecoveryMethod::kGrpo
                              ? 0.0
                              : lambda_schedule(s, total, config.guidance);
    switch (method) {
      case RecoveryMethod::kGrpo: {
        GrpoStepResult r = grpo_step(h.policy, world, mis, config.group_size,
                                     config.clip_eps, config.lr_agent, rng);
        h.policy = std::move(r.policy);
        last = record(s, r.stats);
        break;
      }
      case RecoveryMethod::kGuided: {
        GuidedStepResult r = guided_step(h.policy, world, mis, config.group_size,
                                         config.clip_eps, h.buffer, base.rail, lambda,
                                         config.lr_agent, config.guidance.minibatch_size, s, rng);
        h.policy = std::move(r.policy);
        last = record(s, r.stats);
        break;
      }
      case RecoveryMethod::kOodClone: {
        GuidedStepResult r = fixed_target_step(h.policy, world, mis, config.group_size,
                                               config.clip_eps, targets, lambda,
                                               config.lr_agent, rng);
        h.policy = std::move(r.policy);
        last = record(s, r.stats);
        break;
      }
    }
    last.lambda = lambda;
    h.steps.push_back(last);
  }

  h.steps_to_90 = total + 1;
  for (const Checkpoint& c : h.checkpoints) {
    if (c.misleading_success >= 0.9) {
      h.steps_to_90 = c.step;
      break;
    }
  }
  const std::size_t n = config.final_eval_rollouts;
  const std::uint64_t final_seed = derive_seed(base.seed, kFinalStream);
  h.final_misleading_success =
      rate(kernels::count_successes_parallel(world, h.policy, mis, n,
                                             derive_seed(final_seed, 0)),
           n);
  h.final_clean_success =
      rate(kernels::count_successes_parallel(world, h.policy, {world.clean_start(), 0}, n,
                                             derive_seed(final_seed, 1)),
           n);
  check_invariants(h);
  return h;
}

TrainingHistory as_history(const RailResult& rail) {
  TrainingHistory h;
  h.seed = rail.seed;
  h.method = "rail";
  h.steps = rail.steps;
  h.checkpoints = rail.checkpoints;
  h.policy = rail.policy;
  h.final_clean_success = rail.clean_success;
  return h;
}

TrainingHistory run_two_stage(const GridWorld& world, const ExperimentConfig& config,
                              RecoveryMethod method, std::uint64_t seed) {
  return run_recovery(world, train_rail(world, config, seed), method, config);
}

std::vector<Trajectory> rail_pool(const GridWorld& world, const PolicyTable& base,
                                  std::size_t count, std::uint64_t seed) {
  require(count > 0, "rail pool: count must be positive");
  const std::vector<MazeState> starts(20 * count, MazeState{world.clean_start(), 0});
  std::vector<Trajectory> out;
  for (Trajectory& t : kernels::rollout_batch_parallel(world, base, starts, seed)) {
    if (t.reward == 1 && out.size() < count) out.push_back(std::move(t));
  }
  require(out.size() == count, "rail pool: too few clean-start successes",
          ErrorCode::kUnfitPolicy);
  return out;
}

SelfPlayRun run_selfplay(const GridWorld& world, const RailResult& base,
                         const ExperimentConfig& config) {
  validate(config);
  SelfPlayRun run;
  run.seed = base.seed;
  run.rails = rail_pool(world, base.policy, config.rail_pool, derive_seed(base.seed, kPoolStream));
  run.suite = build_eval_suite(world, base.policy, run.rails.front(), config.eval_suite_size,
                               config.stage1_eval_rollouts, derive_seed(base.seed, kSuiteStream));
  run.history = alternate_train(world, base.policy, base.rail, run.rails, run.suite,
                                selfplay_config(config), derive_seed(base.seed, kSelfPlayStream));
  check_invariants(run);
  return run;
}

GainExperiment run_gain_experiment(const GridWorld& world, const RailResult& base,
                                   double eta_omega, std::size_t n_eval,
                                   std::uint64_t seed) {
  const auto route = shortest_route(world, world.misleading_start());
  std::optional<Cell> context;
  for (std::size_t i = 0; i + 1 < route.size(); ++i) {
    if (base.rail.contains(route[i])) break;
    if (base.rail.contains(route[i + 1])) context = route[i];
  }
  require(context.has_value(), "gain experiment: shortest route never meets the rail",
          ErrorCode::kMazeTooConstrained);
  GainExperiment g;
  g.context = {*context, world.horizon() - *world.shortest_path(*context, world.goal())};
  const auto segments =
      harvest_distinct(world, base.policy, base.rail, g.context, 4000, derive_seed(seed, 0));
  require(!segments.empty(), "gain experiment: no repair harvested", ErrorCode::kInsufficientData);
  g.segment = segments.front();
  const double q_hat = estimate_q_hat(world, base.policy, g.segment, 4000, derive_seed(seed, 1));
  g.prediction = predict_first_order_gain(base.policy, world, g.segment, 1.0, eta_omega, q_hat);
  g.measured = measure_gain(world, base.policy, g.segment, g.context, 1.0, eta_omega, n_eval,
                            derive_seed(seed, 2));
  g.ratio = g.prediction.predicted_gain > 0.0 ? g.measured.delta / g.prediction.predicted_gain
                                              : 0.0;
  return g;
}

GainRatioExperiment run_gain_ratio(const GridWorld& world, const RailSet& rail,
                                   const PolicyTable& policy,
                                   double min_likelihood_ratio, double eta_omega,
                                   std::size_t n_eval, std::uint64_t seed) {
  const MazeState mis{world.misleading_start(), 0};
  const auto segments = harvest_distinct(world, policy, rail, mis, 4000, derive_seed(seed, 0));
  GainRatioExperiment g;
  constexpr std::size_t kCandidates = 10;
  for (std::size_t i = 0; i < segments.size() && i < kCandidates; ++i) {
    const RepairSegment& in = segments[i];
    OodTargetOptions options;
    options.min_likelihood_ratio = min_likelihood_ratio;
    options.length = in.length();
    options.max_candidates = 200'000;
    RepairSegment off;
    try {
      off = make_ood_target(world, rail, policy, mis, std::span(&in, 1), options);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kMazeTooConstrained) throw;
      continue;
    }
    g.found = true;
    g.length = in.length();
    g.likelihood_ratio = std::exp(in.harvest_log_likelihood - off.harvest_log_likelihood);
    g.delta_in = measure_gain(world, policy, in, mis, 1.0, eta_omega, n_eval,
                              derive_seed(seed, 1)).delta;
    g.delta_off = measure_gain(world, policy, off, mis, 1.0, eta_omega, n_eval,
                               derive_seed(seed, 1)).delta;
    if (g.delta_off > 0.0) {
      g.ratio = g.delta_in / g.delta_off;
    } else {
      g.ratio = g.delta_in > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
    break;
  }
  return g;
}

std::vector<Cell> drift_probe_cells(const GridWorld& world, const RailSet& rail) {
  std::vector<Cell> cells = rail.cells();
  for (Cell c : shortest_route(world, world.misleading_start())) {
    if (rail.contains(c)) break;
    cells.push_back(c);
  }
  return cells;
}

DriftExperiment run_drift_experiment(const GridWorld& world, const TrainingHistory& guided,
                                     const TrainingHistory& ood, const RailResult& base) {
  const auto cells = drift_probe_cells(world, base.rail);
  const Eigen::MatrixXd b = logit_rows(base.policy, world, cells);
  DriftExperiment d;
  d.guided = pca_drift(b, logit_rows(guided.policy, world, cells));
  d.ood = pca_drift(b, logit_rows(ood.policy, world, cells));
  d.guided_retention = guided.final_clean_success;
  d.ood_retention = ood.final_clean_success;
  return d;
}

void write_checkpoints_csv(std::ostream& out, std::span<const TrainingHistory> runs) {
  out << "seed,method,step,misleading_success,clean_success,gradient_norm,lambda,buffer_size\n";
  for (const TrainingHistory& h : runs) {
    for (const Checkpoint& c : h.checkpoints) {
      out << h.seed << ',' << h.method << ',' << c.step << ','
          << format_double(c.misleading_success) << ',' << format_double(c.clean_success)
          << ',' << format_double(c.gradient_norm) << ',' << format_double(c.lambda) << ','
          << c.buffer_size << '\n';
    }
  }
}

void write_steps_csv(std::ostream& out, std::span<const TrainingHistory> runs) {
  out << "seed,method,step,role,k,group_size,mean_reward,gradient_norm,clipped_fraction,"
         "guide_grad_norm,lambda,buffer_size,harvested\n";
  for (const TrainingHistory& h : runs) {
    for (const StepRecord& s : h.steps) {
      out << h.seed << ',' << h.method << ',' << s.step << ",agent," << s.k << ','
          << s.group_size << ',' << format_double(s.mean_reward) << ','
          << format_double(s.gradient_norm) << ',' << format_double(s.clipped_fraction)
          << ',' << format_double(s.guide_grad_norm) << ',' << format_double(s.lambda) << ','
          << s.buffer_size << ',' << s.harvested << '\n';
    }
  }
}

void write_selfplay_steps_csv(std::ostream& out, std::span<const SelfPlayRun> runs) {
  out << "seed,step,role,alpha,rail_id,k,group_size,polluter_win_rate,agent_recovery_rate,"
         "gradient_norm,guide_grad_norm,lambda,buffer_size\n";
  for (const SelfPlayRun& r : runs) {
    for (const SelfPlayStep& s : r.history.steps) {
      out << r.seed << ',' << s.step << ',' << (s.role == Role::kAgent ? "agent" : "polluter")
          << ',' << format_double(s.alpha) << ',' << s.rail_id << ',' << s.k << ','
          << s.group_size << ',' << format_double(s.polluter_win_rate) << ','
          << format_double(s.agent_recovery_rate) << ',' << format_double(s.gradient_norm)
          << ',' << format_double(s.guide_grad_norm) << ',' << format_double(s.lambda) << ','
          << s.buffer_size << '\n';
    }
  }
}

void write_selfplay_blocks_csv(std::ostream& out, std::span<const SelfPlayRun> runs) {
  out << "seed,block,end_step,polluter_win_rate,agent_recovery_rate,eval_recovery\n";
  for (const SelfPlayRun& r : runs) {
    for (const SelfPlayBlock& b : r.history.blocks) {
      out << r.seed << ',' << b.block << ',' << b.end_step << ','
          << format_double(b.polluter_win_rate) << ',' << format_double(b.agent_recovery_rate)
          << ',' << format_double(b.eval_recovery) << '\n';
    }
  }
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) == 1,
          "sha256 failed", ErrorCode::kIo);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string(), ErrorCode::kIo);
  out << text;
  require(out.good(), "write failed: " + path.string(), ErrorCode::kIo);
}

void write_provenance(const std::filesystem::path& dir, const ExperimentConfig& config,
                      const GridWorld& world) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.txt", to_text(config));
  const std::string maze = world.to_text();
  write_text(dir / "maze.txt", maze);
  write_text(dir / "maze.sha256", sha256_hex(maze) + "  maze.txt\n");
}

void check_invariants(const TrainingHistory& run) {
  std::optional<std::size_t> prev;
  for (const Checkpoint& c : run.checkpoints) {
    require(!prev || c.step > *prev, "checkpoints out of order", ErrorCode::kInvariantViolation);
    prev = c.step;
    require_rate(c.misleading_success, "misleading success");
    require_rate(c.clean_success, "clean success");
  }
  require_rate(run.final_misleading_success, "final misleading success");
  require_rate(run.final_clean_success, "final clean success");
  for (std::size_t k = 0; k < run.policy.num_keys(); ++k) {
    for (double x : run.policy.logits(k)) {
      require(std::isfinite(x), "non-finite logit", ErrorCode::kInvariantViolation);
    }
  }
}

void check_invariants(const SelfPlayRun& run) {
  for (const SelfPlayStep& s : run.history.steps) {
    require_rate(s.agent_recovery_rate, "agent recovery rate");
    require(s.polluter_win_rate == 1.0 - s.agent_recovery_rate,
            "polluter win rate is not the complement of recovery",
            ErrorCode::kInvariantViolation);
  }
  for (const SelfPlayBlock& b : run.history.blocks) {
    require_rate(b.eval_recovery, "eval recovery");
    if (b.end_step == 0) continue;
    require(b.polluter_win_rate == 1.0 - b.agent_recovery_rate,
            "block polluter win rate is not the complement of recovery",
            ErrorCode::kInvariantViolation);
  }
}

}  // namespace gasp
