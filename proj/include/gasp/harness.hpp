#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gasp/analysis.hpp"
#include "gasp/grpo.hpp"
#include "gasp/guidance.hpp"
#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"
#include "gasp/selfplay.hpp"

namespace gasp {

enum class Mode {
  kRail,
  kRecoveryGrpo,
  kRecoveryGuided,
  kRecoveryOod,
  kSelfplay,
  kAnalyze,
};

std::string_view to_string(Mode mode);
Mode mode_from_string(std::string_view name);

enum class RecoveryMethod { kGrpo, kGuided, kOodClone };

std::string_view to_string(RecoveryMethod method);
RecoveryMethod recovery_method_from_string(std::string_view name);

struct ExperimentConfig {
  std::string maze;  // empty: the built-in canonical maze
  std::size_t stage1_steps = 3000;
  std::size_t stage2_steps = 2000;
  std::size_t group_size = 16;
  std::size_t polluter_group_size = 16;
  double clip_eps = kDefaultClipEps;
  double lr_agent = 5.0;
  double lr_polluter = 5.0;
  double temperature = 1.0;
  GuidanceConfig guidance;
  std::size_t eval_every = 10;
  std::size_t eval_rollouts = 10;
  std::vector<std::uint64_t> seeds = {42, 52, 62, 72, 82};
  Mode mode = Mode::kRecoveryGuided;

  double stage1_threshold = 0.95;
  std::size_t stage1_eval_rollouts = 200;
  std::size_t rail_rollouts = 100;

  std::size_t selfplay_blocks = 60;
  std::size_t block_size = 5;
  PolluterMode polluter_mode = PolluterMode::kAdaptive;
  std::size_t rail_pool = 8;
  std::size_t eval_suite_size = 4;

  std::size_t final_eval_rollouts = 2000;
  double ood_likelihood_ratio = 10.0;
};

struct ConfigKey {
  std::string_view name;
  std::string_view help;
};

// Every key parse_config accepts, in to_text order.
std::span<const ConfigKey> config_keys();

void validate(const ExperimentConfig& config);

// "key = value" lines; '#' starts a comment. Unknown keys and bad values are
// rejected with the key named in the message.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Resolved config with every key, parseable by parse_config.
std::string to_text(const ExperimentConfig& config);

GridWorld load_world(const ExperimentConfig& config);
SelfPlayConfig selfplay_config(const ExperimentConfig& config);

struct StepRecord {
  std::size_t step = 0;
  std::size_t k = 0;
  std::size_t group_size = 0;
  double mean_reward = 0.0;
  double gradient_norm = 0.0;
  double clipped_fraction = 0.0;
  double guide_grad_norm = 0.0;
  double lambda = 0.0;
  std::size_t buffer_size = 0;
  std::size_t harvested = 0;
};

struct Checkpoint {
  std::size_t step = 0;
  double misleading_success = 0.0;
  double clean_success = 0.0;
  double gradient_norm = 0.0;
  double lambda = 0.0;
  std::size_t buffer_size = 0;
};

struct RailResult {
  std::uint64_t seed = 0;
  PolicyTable policy;
  RailSet rail;
  double clean_success = 0.0;  // stage1_eval_rollouts gate estimate
  std::vector<StepRecord> steps;
  std::vector<Checkpoint> checkpoints;
};

struct TrainingHistory {
  std::uint64_t seed = 0;
  std::string method;
  std::vector<StepRecord> steps;
  std::vector<Checkpoint> checkpoints;
  PolicyTable policy;
  RepairBuffer buffer;
  // final_eval_rollouts estimates after the last update.
  double final_misleading_success = 0.0;
  double final_clean_success = 0.0;
  // First checkpoint step with misleading success >= 0.9, stage2_steps + 1
  // when never reached.
  std::size_t steps_to_90 = 0;
};

// Stage 1: stage1_steps GRPO updates from the clean start, then the
// stage1_threshold gate (kStageOneFailed below it) and the rail set.
RailResult train_rail(const GridWorld& world, const ExperimentConfig& config,
                      std::uint64_t seed);

// Stage 2 from the misleading start. Evaluation seeds depend only on (seed,
// step), so every method is scored on the same rollout streams.
TrainingHistory run_recovery(const GridWorld& world, const RailResult& base,
                             RecoveryMethod method,
                             const ExperimentConfig& config);

// Stage-1 records in TrainingHistory form (method "rail").
TrainingHistory as_history(const RailResult& rail);

TrainingHistory run_two_stage(const GridWorld& world,
                              const ExperimentConfig& config,
                              RecoveryMethod method, std::uint64_t seed);

// Segments harvested from `policy` rollouts at `context`, most likely first,
// one per distinct action sequence.
std::vector<RepairSegment> harvest_distinct(const GridWorld& world,
                                            const PolicyTable& policy,
                                            const RailSet& rail,
                                            const MazeState& context,
                                            std::size_t n, std::uint64_t seed);

// The ood-clone teacher target from the misleading start: the most likely
// repair at most 1 / ood_likelihood_ratio as likely as the best reference,
// where references are the shortest repairs plus the policy's own harvest.
RepairSegment ood_target_for(const GridWorld& world, const RailResult& base,
                             const ExperimentConfig& config);

struct SelfPlayRun {
  std::uint64_t seed = 0;
  EvalSuite suite;
  std::vector<Trajectory> rails;
  SelfPlayHistory history;
};

// Clean-start successes of the base policy used as rails.
std::vector<Trajectory> rail_pool(const GridWorld& world, const PolicyTable& base,
                                  std::size_t count, std::uint64_t seed);

SelfPlayRun run_selfplay(const GridWorld& world, const RailResult& base,
                         const ExperimentConfig& config);

// Analysis protocols.

struct GainExperiment {
  MazeState context;
  RepairSegment segment;
  GainPrediction prediction;
  MeasuredGain measured;
  double ratio = 0.0;  // measured / predicted
};

// One guidance step on the most likely repair harvested from the last
// off-rail cell before the rail on the shortest misleading-start route, with
// exactly enough steps left to reach the goal.
GainExperiment run_gain_experiment(const GridWorld& world, const RailResult& base,
                                   double eta_omega, std::size_t n_eval,
                                   std::uint64_t seed);

struct GainRatioExperiment {
  bool found = false;  // a matched-length target meeting the ratio exists
  std::size_t length = 0;
  double likelihood_ratio = 0.0;
  double delta_in = 0.0;
  double delta_off = 0.0;
  double ratio = 0.0;  // delta_in / delta_off, +inf when delta_off <= 0 < delta_in
};

// In-dist: harvested repairs from the misleading start under `policy`, most
// likely first; off-dist: the matched-length make_ood_target for the first of
// them that admits one.
GainRatioExperiment run_gain_ratio(const GridWorld& world, const RailSet& rail,
                                   const PolicyTable& policy,
                                   double min_likelihood_ratio, double eta_omega,
                                   std::size_t n_eval, std::uint64_t seed);

struct DriftExperiment {
  DriftReport guided;
  DriftReport ood;
  double guided_retention = 0.0;
  double ood_retention = 0.0;
};

// Rail cells, then the off-rail cells of the shortest misleading-start route
// up to its first rail cell.
std::vector<Cell> drift_probe_cells(const GridWorld& world, const RailSet& rail);

// Probe rows: base and trained logits at drift_probe_cells.
DriftExperiment run_drift_experiment(const GridWorld& world,
                                     const TrainingHistory& guided,
                                     const TrainingHistory& ood,
                                     const RailResult& base);

// Output.

void write_checkpoints_csv(std::ostream& out,
                           std::span<const TrainingHistory> runs);
void write_steps_csv(std::ostream& out, std::span<const TrainingHistory> runs);
void write_selfplay_steps_csv(std::ostream& out, std::span<const SelfPlayRun> runs);
void write_selfplay_blocks_csv(std::ostream& out, std::span<const SelfPlayRun> runs);

std::string sha256_hex(std::string_view data);

// config.txt, maze.txt and maze.sha256 in `dir` (created if missing).
void write_provenance(const std::filesystem::path& dir,
                      const ExperimentConfig& config, const GridWorld& world);

void write_text(const std::filesystem::path& path, std::string_view text);

// Throws kInvariantViolation on out-of-range rates or unordered checkpoints.
void check_invariants(const TrainingHistory& run);
void check_invariants(const SelfPlayRun& run);

}  // namespace gasp
