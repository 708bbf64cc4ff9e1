#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include "gasp/gridworld.hpp"
#include "gasp/random.hpp"

namespace gasp {

using ActionRow = std::array<double, kNumActions>;

// One sampled token: the table row it was drawn from and the action taken.
struct Decision {
  std::size_t key = 0;
  Action action = Action::kN;
  bool operator==(const Decision&) const = default;
};

// Sparse gradient over a PolicyTable: row key -> partial derivatives for the
// eight logits of that row.
class ScoreGradient {
 public:
  using Rows = std::map<std::size_t, ActionRow>;

  void add(std::size_t key, const ActionRow& row, double scale = 1.0);
  void add(std::size_t key, Action a, double value);
  void accumulate(const ScoreGradient& other, double scale = 1.0);
  void scale(double factor);

  double at(std::size_t key, Action a) const;
  double dot(const ScoreGradient& other) const;
  double squared_norm() const;
  double norm() const;
  double max_abs() const;
  bool all_finite() const;

  bool empty() const { return rows_.empty(); }
  const Rows& rows() const { return rows_; }

 private:
  Rows rows_;
};

// Tabular softmax policy. Agent tables are keyed by cell index; the polluter
// uses its own key space (see selfplay.hpp).
class PolicyTable {
 public:
  PolicyTable() = default;
  explicit PolicyTable(std::size_t num_keys, double temperature = 1.0);

  std::size_t num_keys() const { return logits_.size(); }
  double temperature() const { return temperature_; }
  void set_temperature(double temperature);

  const ActionRow& logits(std::size_t key) const { return logits_.at(key); }
  ActionRow& logits(std::size_t key) { return logits_.at(key); }

  ActionRow distribution(std::size_t key) const;
  double log_prob(std::size_t key, Action a) const;
  Action sample(std::size_t key, Rng& rng) const;

  bool operator==(const PolicyTable&) const = default;

 private:
  std::vector<ActionRow> logits_;
  double temperature_ = 1.0;
};

// softmax(logits[cell] / temperature) for an agent policy.
ActionRow action_distribution(const PolicyTable& policy,
                              const GridWorld& world, const MazeState& state);
Action sample_action(const PolicyTable& policy, const GridWorld& world,
                     const MazeState& state, Rng& rng);

// d log pi(a | key) / d logit(key, a') = (1{a = a'} - pi(a' | key)) / T.
ScoreGradient logprob_grad(const PolicyTable& policy, std::size_t key,
                           Action a);

// Average of per-token score gradients; zero for an empty sequence.
ScoreGradient traj_score(const PolicyTable& policy,
                         std::span<const Decision> decisions);
// Sum of per-token score gradients.
ScoreGradient sequence_score(const PolicyTable& policy,
                             std::span<const Decision> decisions);
double sequence_log_prob(const PolicyTable& policy,
                         std::span<const Decision> decisions);

// Agent tokens of a maze trajectory (key = cell index of the acting state).
std::vector<Decision> decisions_of(const GridWorld& world,
                                   const Trajectory& trajectory);
ScoreGradient traj_score(const PolicyTable& policy, const GridWorld& world,
                         const Trajectory& trajectory);

// logits += step_size * gradient on the touched rows only.
PolicyTable apply_update(const PolicyTable& policy,
                         const ScoreGradient& gradient, double step_size);
void apply_update_in_place(PolicyTable& policy, const ScoreGradient& gradient,
                           double step_size);

// Largest relative gap between the analytic row gradient of log pi(a | key)
// and a central difference with step h, over the eight logits of the row.
double finite_diff_check(const PolicyTable& policy, std::size_t key, Action a,
                         double h);

// Checkpoint: "gasp-policy v1" header, temperature and row count, then one
// line per key with eight logits as hex floats. Round trips bit-exactly.
void write_policy(std::ostream& out, const PolicyTable& policy);
PolicyTable read_policy(std::istream& in);
void save_policy(const std::filesystem::path& path, const PolicyTable& policy);
PolicyTable load_policy(const std::filesystem::path& path);

}  // namespace gasp
