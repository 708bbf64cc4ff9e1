#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gasp/analysis.hpp"
#include "gasp/error.hpp"
#include "gasp/grpo.hpp"
#include "gasp/guidance.hpp"
#include "gasp/harness.hpp"
#include "gasp/policy.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gasp;

namespace {

enum Exit : int {
  kOk = 0,
  kUsage = 1,
  kRuntime = 2,
  kInvariant = 3,
  kStageOne = 4,
};

struct Options {
  std::string config_file;
  std::map<std::string, std::string> overrides;
  fs::path out;
  int threads = 0;
};

ExperimentConfig resolve(const Options& opt) {
  std::string text;
  if (!opt.config_file.empty()) {
    std::ifstream in(opt.config_file);
    if (!in) fail(ErrorCode::kIo, "cannot read config " + opt.config_file);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str() + "\n";
  }
  for (const auto& [key, value] : opt.overrides) text += key + " = " + value + "\n";
  return parse_config(text);
}

json stats(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {{"mean", mean}, {"std", v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0}, {"values", v}};
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

template <class Fn>
void write_csv(const fs::path& path, Fn&& fn) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  fn(out);
}

fs::path seed_file(const fs::path& dir, std::string_view stem, std::uint64_t seed,
                   std::string_view ext) {
  return dir / (std::string(stem) + "_" + std::to_string(seed) + std::string(ext));
}

int train_rail_cmd(ExperimentConfig config, const fs::path& out) {
  config.mode = Mode::kRail;
  const GridWorld world = load_world(config);
  write_provenance(out, config, world);
  std::vector<TrainingHistory> runs;
  std::vector<double> clean;
  json per_seed = json::array();
  for (std::uint64_t seed : config.seeds) {
    const RailResult r = train_rail(world, config, seed);
    save_policy(seed_file(out, "policy", seed, ".txt"), r.policy);
    runs.push_back(as_history(r));
    clean.push_back(r.clean_success);
    per_seed.push_back({{"seed", seed}, {"clean_success", r.clean_success},
                        {"rail_cells", r.rail.size()}});
  }
  write_csv(out / "metrics.csv", [&](std::ostream& o) { write_checkpoints_csv(o, runs); });
  write_csv(out / "steps.csv", [&](std::ostream& o) { write_steps_csv(o, runs); });
  write_json(out / "summary.json", {{"command", "train-rail"},
                                    {"clean_success", stats(clean)},
                                    {"seeds", per_seed}});
  return kOk;
}

int train_recovery_cmd(ExperimentConfig config, RecoveryMethod method, const fs::path& out) {
  config.mode = method == RecoveryMethod::kGrpo     ? Mode::kRecoveryGrpo
                : method == RecoveryMethod::kGuided ? Mode::kRecoveryGuided
                                                    : Mode::kRecoveryOod;
  const GridWorld world = load_world(config);
  write_provenance(out, config, world);
  std::vector<TrainingHistory> runs;
  std::vector<double> mis, clean, hit;
  json per_seed = json::array();
  for (std::uint64_t seed : config.seeds) {
    const RailResult base = train_rail(world, config, seed);
    save_policy(seed_file(out, "base_policy", seed, ".txt"), base.policy);
    TrainingHistory h = run_recovery(world, base, method, config);
    save_policy(seed_file(out, "policy", seed, ".txt"), h.policy);
    if (method == RecoveryMethod::kGuided) save_buffer(seed_file(out, "buffer", seed, ".tsv"), h.buffer);
    mis.push_back(h.final_misleading_success);
    clean.push_back(h.final_clean_success);
    hit.push_back(static_cast<double>(h.steps_to_90));
    per_seed.push_back({{"seed", seed},
                        {"misleading_success", h.final_misleading_success},
                        {"clean_success", h.final_clean_success},
                        {"steps_to_90", h.steps_to_90}});
    runs.push_back(std::move(h));
  }
  write_csv(out / "metrics.csv", [&](std::ostream& o) { write_checkpoints_csv(o, runs); });
  write_csv(out / "steps.csv", [&](std::ostream& o) { write_steps_csv(o, runs); });
  write_json(out / "summary.json", {{"command", "train-recovery"},
                                    {"method", to_string(method)},
                                    {"misleading_success", stats(mis)},
                                    {"clean_success", stats(clean)},
                                    {"steps_to_90", stats(hit)},
                                    {"seeds", per_seed}});
  return kOk;
}

int selfplay_cmd(ExperimentConfig config, bool freeze, const fs::path& out) {
  config.mode = Mode::kSelfplay;
  if (freeze) config.polluter_mode = PolluterMode::kFrozen;
  const GridWorld world = load_world(config);
  write_provenance(out, config, world);
  std::vector<SelfPlayRun> runs;
  std::vector<double> first, last;
  json per_seed = json::array();
  for (std::uint64_t seed : config.seeds) {
    const RailResult base = train_rail(world, config, seed);
    SelfPlayRun run = run_selfplay(world, base, config);
    save_policy(seed_file(out, "agent_policy", seed, ".txt"), run.history.agent);
    save_policy(seed_file(out, "polluter_policy", seed, ".txt"), run.history.polluter.table());
    const auto& blocks = run.history.blocks;
    first.push_back(blocks.front().eval_recovery);
    last.push_back(blocks.back().eval_recovery);
    per_seed.push_back({{"seed", seed},
                        {"initial_eval_recovery", blocks.front().eval_recovery},
                        {"final_eval_recovery", blocks.back().eval_recovery},
                        {"suite_size", run.suite.starts.size()}});
    runs.push_back(std::move(run));
  }
  write_csv(out / "metrics.csv", [&](std::ostream& o) { write_selfplay_blocks_csv(o, runs); });
  write_csv(out / "history.csv", [&](std::ostream& o) { write_selfplay_steps_csv(o, runs); });
  write_json(out / "summary.json", {{"command", "selfplay"},
                                    {"polluter_mode", to_string(config.polluter_mode)},
                                    {"initial_eval_recovery", stats(first)},
                                    {"final_eval_recovery", stats(last)},
                                    {"seeds", per_seed}});
  return kOk;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) v.push_back(std::stod(item));
  return v;
}

json scarcity_report(const std::string& ps, const std::string& gs) {
  json rows = json::array();
  for (double p : parse_list(ps)) {
    for (double g : parse_list(gs)) {
      const ScarcityReport r = success_probability(p, static_cast<std::size_t>(g));
      rows.push_back({{"p", r.p}, {"group_size", r.group_size}, {"exact", r.exact_prob},
                      {"linear", r.linear_approx}, {"relative_error", r.relative_error}});
    }
  }
  return rows;
}

json snr_report(const GridWorld& world, const ExperimentConfig& config, std::size_t pool) {
  json per_seed = json::array();
  for (std::uint64_t seed : config.seeds) {
    const RailResult base = train_rail(world, config, seed);
    Rng rng(seed);
    TrajectoryGroup g = sample_group(world, base.policy, {world.misleading_start(), 0}, pool, rng);
    const ClassStats cs = estimate_class_stats(std::span(&g, 1), base.policy);
    SnrInputs in = cs.inputs;
    in.group_size = config.group_size;
    json curve = json::array();
    for (std::size_t k = 1; k < config.group_size; ++k) {
      in.k = k;
      curve.push_back({{"k", k}, {"snr_squared", snr_squared(in)}});
    }
    const double a = std::sqrt(in.tr_sigma1), b = std::sqrt(in.tr_sigma0);
    per_seed.push_back({{"seed", seed},
                        {"n_success", cs.n1},
                        {"n_failure", cs.n0},
                        {"mu_diff_norm_sq", in.mu_diff_norm_sq},
                        {"tr_sigma1", in.tr_sigma1},
                        {"tr_sigma0", in.tr_sigma0},
                        {"k_peak", static_cast<double>(in.group_size) * a / (a + b)},
                        {"curve", curve}});
  }
  return per_seed;
}

json gain_report(const GridWorld& world, const ExperimentConfig& config, double eta_omega,
                 std::size_t n_eval) {
  json per_seed = json::array();
  std::vector<double> ratios;
  for (std::uint64_t seed : config.seeds) {
    const RailResult base = train_rail(world, config, seed);
    const GainExperiment e = run_gain_experiment(world, base, eta_omega, n_eval, seed);
    ratios.push_back(e.ratio);
    per_seed.push_back({{"seed", seed},
                        {"context", {e.context.cell.row, e.context.cell.col, e.context.steps_taken}},
                        {"segment_length", e.segment.length()},
                        {"target_likelihood", e.prediction.target_likelihood},
                        {"score_norm_sq", e.prediction.score_norm_sq},
                        {"q_hat", e.prediction.q_hat},
                        {"predicted", e.prediction.predicted_gain},
                        {"before", e.measured.before},
                        {"after", e.measured.after},
                        {"measured", e.measured.delta},
                        {"ratio", e.ratio}});
  }
  return {{"eta_omega", eta_omega}, {"ratio", stats(ratios)}, {"seeds", per_seed}};
}

json drift_report(const GridWorld& world, const ExperimentConfig& config) {
  json per_seed = json::array();
  for (std::uint64_t seed : config.seeds) {
    const RailResult base = train_rail(world, config, seed);
    const TrainingHistory guided = run_recovery(world, base, RecoveryMethod::kGuided, config);
    const TrainingHistory ood = run_recovery(world, base, RecoveryMethod::kOodClone, config);
    const DriftExperiment d = run_drift_experiment(world, guided, ood, base);
    auto shifts = [](const DriftReport& r) {
      json rows = json::array();
      for (const auto& [dm1, m2] : r.per_row_shifts) rows.push_back({dm1, m2});
      return rows;
    };
    per_seed.push_back({{"seed", seed},
                        {"d_guided", d.guided.d},
                        {"d_ood", d.ood.d},
                        {"retention_guided", d.guided_retention},
                        {"retention_ood", d.ood_retention},
                        {"shifts_guided", shifts(d.guided)},
                        {"shifts_ood", shifts(d.ood)}});
  }
  return per_seed;
}

// Finite-difference check of every row gradient on random or loaded tables.
int gradcheck_cmd(const std::string& policy_file, std::size_t checks, double h, double tol,
                  std::uint64_t seed, const fs::path& out) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> logit(-2.0, 2.0);
  std::optional<PolicyTable> loaded;
  if (!policy_file.empty()) loaded = load_policy(policy_file);
  double worst = 0.0;
  for (std::size_t i = 0; i < checks; ++i) {
    PolicyTable p = loaded ? *loaded : PolicyTable(4);
    if (!loaded) {
      for (std::size_t k = 0; k < p.num_keys(); ++k)
        for (double& x : p.logits(k)) x = logit(gen);
    }
    const std::size_t key = gen() % p.num_keys();
    const Action a = action_from_index(gen() % kNumActions);
    worst = std::max(worst, finite_diff_check(p, key, a, h));
  }
  fs::create_directories(out);
  write_json(out / "gradcheck.json",
             {{"checks", checks}, {"h", h}, {"max_relative_error", worst}, {"tolerance", tol}});
  std::cout << "max relative error " << worst << " over " << checks << " checks\n";
  return worst <= tol ? kOk : kInvariant;
}

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kInvalidArgument: return kUsage;
    case ErrorCode::kInvariantViolation: return kInvariant;
    case ErrorCode::kStageOneFailed: return kStageOne;
    default: return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tabular GRPO with rail guidance on an 8-connected maze"};
  app.require_subcommand(1);
  app.fallthrough();

  Options opt;
  app.add_option("--config", opt.config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--out", opt.out, "output directory")->required();
  app.add_option("--threads", opt.threads, "OpenMP threads (0: runtime default)");
  for (const ConfigKey& key : config_keys()) {
    std::string flag = "--" + std::string(key.name);
    std::replace(flag.begin(), flag.end(), '_', '-');
    app.add_option_function<std::string>(
        flag, [&opt, name = std::string(key.name)](const std::string& v) { opt.overrides[name] = v; },
        std::string(key.help));
  }

  auto* rail = app.add_subcommand("train-rail", "stage 1 only: clean-start training and rail set");

  std::string method = "guided";
  auto* recovery = app.add_subcommand("train-recovery", "stage 1 then recovery from the misleading start");
  recovery->add_option("--method", method)->check(CLI::IsMember({"grpo", "guided", "ood-clone"}));

  bool freeze = false;
  auto* selfplay = app.add_subcommand("selfplay", "agent/polluter alternation on polluted starts");
  selfplay->add_flag("--freeze-polluter", freeze, "keep the initial polluter");

  std::string kind;
  std::string ps = "0.001,0.005,0.01,0.05,0.1", gs = "4,8,16,32,64";
  std::size_t pool = 20000, n_eval = 20000;
  double eta_omega = 0.3;
  auto* analyze = app.add_subcommand("analyze", "analysis reports");
  analyze->add_option("kind", kind)->required()->check(CLI::IsMember({"scarcity", "snr", "gain", "drift"}));
  analyze->add_option("--p", ps, "scarcity: comma-separated success rates");
  analyze->add_option("--g", gs, "scarcity: comma-separated group sizes");
  analyze->add_option("--pool", pool, "snr: trajectories pooled per seed");
  analyze->add_option("--eta-omega", eta_omega, "gain: step size");
  analyze->add_option("--n-eval", n_eval, "gain: rollouts per estimate");

  std::string policy_file;
  std::size_t checks = 100;
  double h = 1e-5, tol = 1e-5;
  std::uint64_t check_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of score gradients");
  gradcheck->add_option("--policy", policy_file, "policy checkpoint to check")->check(CLI::ExistingFile);
  gradcheck->add_option("--checks", checks);
  gradcheck->add_option("--step", h, "central-difference step");
  gradcheck->add_option("--tol", tol);
  gradcheck->add_option("--seed", check_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (opt.threads > 0) omp_set_num_threads(opt.threads);
    if (gradcheck->parsed()) return gradcheck_cmd(policy_file, checks, h, tol, check_seed, opt.out);

    const ExperimentConfig config = resolve(opt);
    validate(config);
    if (rail->parsed()) return train_rail_cmd(config, opt.out);
    if (recovery->parsed()) return train_recovery_cmd(config, recovery_method_from_string(method), opt.out);
    if (selfplay->parsed()) return selfplay_cmd(config, freeze, opt.out);

    ExperimentConfig cfg = config;
    cfg.mode = Mode::kAnalyze;
    const GridWorld world = load_world(cfg);
    write_provenance(opt.out, cfg, world);
    json report = {{"analysis", kind}};
    if (kind == "scarcity") report["rows"] = scarcity_report(ps, gs);
    if (kind == "snr") report["seeds"] = snr_report(world, cfg, pool);
    if (kind == "gain") report.update(gain_report(world, cfg, eta_omega, n_eval));
    if (kind == "drift") report["seeds"] = drift_report(world, cfg);
    write_json(opt.out / ("analysis_" + kind + ".json"), report);
    return kOk;
  } catch (const Error& e) {
    std::cerr << "gasp: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "gasp: " << e.what() << "\n";
    return kRuntime;
  }
}
