#include "gasp/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "gasp/error.hpp"

namespace gasp {

void ScoreGradient::add(std::size_t key, const ActionRow& row, double scale) {
  auto& dst = rows_[key];
  for (std::size_t j = 0; j < kNumActions; ++j) dst[j] += scale * row[j];
}

void ScoreGradient::add(std::size_t key, Action a, double value) {
  rows_[key][to_index(a)] += value;
}

void ScoreGradient::accumulate(const ScoreGradient& other, double scale) {
  for (const auto& [key, row] : other.rows_) add(key, row, scale);
}

void ScoreGradient::scale(double factor) {
  for (auto& [key, row] : rows_) {
    for (double& v : row) v *= factor;
  }
}

double ScoreGradient::at(std::size_t key, Action a) const {
  const auto it = rows_.find(key);
  return it == rows_.end() ? 0.0 : it->second[to_index(a)];
}

double ScoreGradient::dot(const ScoreGradient& other) const {
  double total = 0.0;
  for (const auto& [key, row] : rows_) {
    const auto it = other.rows_.find(key);
    if (it == other.rows_.end()) continue;
    for (std::size_t j = 0; j < kNumActions; ++j) total += row[j] * it->second[j];
  }
  return total;
}

double ScoreGradient::squared_norm() const { return dot(*this); }

double ScoreGradient::norm() const { return std::sqrt(squared_norm()); }

double ScoreGradient::max_abs() const {
  double m = 0.0;
  for (const auto& [key, row] : rows_) {
    for (double v : row) m = std::max(m, std::abs(v));
  }
  return m;
}

bool ScoreGradient::all_finite() const {
  for (const auto& [key, row] : rows_) {
    for (double v : row) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

PolicyTable::PolicyTable(std::size_t num_keys, double temperature)
    : logits_(num_keys, ActionRow{}), temperature_(temperature) {
  set_temperature(temperature);
}

void PolicyTable::set_temperature(double temperature) {
  require(std::isfinite(temperature) && temperature > 0.0,
          "temperature must be positive and finite");
  temperature_ = temperature;
}

ActionRow PolicyTable::distribution(std::size_t key) const {
  const ActionRow& z = logits_.at(key);
  const double top = *std::max_element(z.begin(), z.end());
  ActionRow p;
  double total = 0.0;
  for (std::size_t j = 0; j < kNumActions; ++j) {
    p[j] = std::exp((z[j] - top) / temperature_);
    total += p[j];
  }
  for (double& v : p) v /= total;
  return p;
}

double PolicyTable::log_prob(std::size_t key, Action a) const {
  const ActionRow& z = logits_.at(key);
  const double top = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp((v - top) / temperature_);
  return (z[to_index(a)] - top) / temperature_ - std::log(total);
}

Action PolicyTable::sample(std::size_t key, Rng& rng) const {
  const ActionRow p = distribution(key);
  const double u = uniform01(rng);
  double cumulative = 0.0;
  for (std::size_t j = 0; j + 1 < kNumActions; ++j) {
    cumulative += p[j];
    if (u < cumulative) return action_from_index(j);
  }
  return action_from_index(kNumActions - 1);
}

ActionRow action_distribution(const PolicyTable& policy,
                              const GridWorld& world, const MazeState& state) {
  require(world.valid(state), "action_distribution: invalid state");
  return policy.distribution(world.index(state.cell));
}

Action sample_action(const PolicyTable& policy, const GridWorld& world,
                     const MazeState& state, Rng& rng) {
  require(world.valid(state), "sample_action: invalid state");
  return policy.sample(world.index(state.cell), rng);
}

ScoreGradient logprob_grad(const PolicyTable& policy, std::size_t key,
                           Action a) {
  const ActionRow p = policy.distribution(key);
  const double inv_t = 1.0 / policy.temperature();
  ActionRow row;
  for (std::size_t j = 0; j < kNumActions; ++j) {
    row[j] = ((j == to_index(a) ? 1.0 : 0.0) - p[j]) * inv_t;
  }
  ScoreGradient g;
  g.add(key, row);
  return g;
}

ScoreGradient sequence_score(const PolicyTable& policy,
                             std::span<const Decision> decisions) {
  ScoreGradient g;
  const double inv_t = 1.0 / policy.temperature();
  for (const Decision& d : decisions) {
    const ActionRow p = policy.distribution(d.key);
    ActionRow row;
    for (std::size_t j = 0; j < kNumActions; ++j) {
      row[j] = ((j == to_index(d.action) ? 1.0 : 0.0) - p[j]) * inv_t;
    }
    g.add(d.key, row);
  }
  return g;
}

ScoreGradient traj_score(const PolicyTable& policy,
                         std::span<const Decision> decisions) {
  ScoreGradient g = sequence_score(policy, decisions);
  if (!decisions.empty()) g.scale(1.0 / static_cast<double>(decisions.size()));
  return g;
}

double sequence_log_prob(const PolicyTable& policy,
                         std::span<const Decision> decisions) {
  double total = 0.0;
  for (const Decision& d : decisions) total += policy.log_prob(d.key, d.action);
  return total;
}

std::vector<Decision> decisions_of(const GridWorld& world,
                                   const Trajectory& trajectory) {
  std::vector<Decision> out;
  out.reserve(trajectory.moves.size());
  for (std::size_t t = 0; t < trajectory.moves.size(); ++t) {
    out.push_back({world.index(trajectory.states[t].cell), trajectory.moves[t]});
  }
  return out;
}

ScoreGradient traj_score(const PolicyTable& policy, const GridWorld& world,
                         const Trajectory& trajectory) {
  const auto decisions = decisions_of(world, trajectory);
  return traj_score(policy, decisions);
}

void apply_update_in_place(PolicyTable& policy, const ScoreGradient& gradient,
                           double step_size) {
  require(std::isfinite(step_size), "apply_update: step size must be finite");
  require(gradient.all_finite(), "apply_update: non-finite gradient entry");
  if (step_size == 0.0) return;
  for (const auto& [key, row] : gradient.rows()) {
    require(key < policy.num_keys(), "apply_update: gradient key out of range");
    ActionRow& z = policy.logits(key);
    for (std::size_t j = 0; j < kNumActions; ++j) z[j] += step_size * row[j];
  }
}

PolicyTable apply_update(const PolicyTable& policy,
                         const ScoreGradient& gradient, double step_size) {
  PolicyTable out = policy;
  apply_update_in_place(out, gradient, step_size);
  return out;
}

double finite_diff_check(const PolicyTable& policy, std::size_t key, Action a,
                         double h) {
  require(h >= 1e-7 && h <= 1e-3, "finite_diff_check: h must be in [1e-7, 1e-3]");
  const ScoreGradient analytic = logprob_grad(policy, key, a);
  PolicyTable probe = policy;
  double worst = 0.0;
  for (std::size_t j = 0; j < kNumActions; ++j) {
    const double base = policy.logits(key)[j];
    probe.logits(key)[j] = base + h;
    const double up = probe.log_prob(key, a);
    probe.logits(key)[j] = base - h;
    const double down = probe.log_prob(key, a);
    probe.logits(key)[j] = base;
    const double numeric = (up - down) / (2.0 * h);
    const double exact = analytic.at(key, action_from_index(j));
    worst = std::max(worst, std::abs(exact - numeric) / (std::abs(exact) + 1e-12));
  }
  return worst;
}

namespace {

constexpr std::string_view kPolicyMagic = "gasp-policy v1";

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_double(const std::string& token) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::kIo, "policy file: bad number '" + token + "'");
  }
  require(used == token.size(), "policy file: bad number '" + token + "'",
          ErrorCode::kIo);
  return v;
}

}  // namespace

void write_policy(std::ostream& out, const PolicyTable& policy) {
  out << kPolicyMagic << '\n';
  out << "temperature " << hex_double(policy.temperature()) << '\n';
  out << "rows " << policy.num_keys() << '\n';
  for (std::size_t key = 0; key < policy.num_keys(); ++key) {
    out << key;
    for (double v : policy.logits(key)) out << ' ' << hex_double(v);
    out << '\n';
  }
}

PolicyTable read_policy(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kPolicyMagic,
          "policy file: missing '" + std::string(kPolicyMagic) + "' header",
          ErrorCode::kIo);
  std::string word, value;
  require(static_cast<bool>(in >> word >> value) && word == "temperature",
          "policy file: missing temperature", ErrorCode::kIo);
  const double temperature = parse_double(value);
  std::size_t rows = 0;
  require(static_cast<bool>(in >> word >> rows) && word == "rows",
          "policy file: missing row count", ErrorCode::kIo);
  PolicyTable policy(rows, temperature);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t key = 0;
    require(static_cast<bool>(in >> key) && key == i,
            "policy file: rows out of order at " + std::to_string(i),
            ErrorCode::kIo);
    for (double& v : policy.logits(key)) {
      require(static_cast<bool>(in >> value), "policy file: truncated row",
              ErrorCode::kIo);
      v = parse_double(value);
    }
  }
  return policy;
}

void save_policy(const std::filesystem::path& path, const PolicyTable& policy) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string(), ErrorCode::kIo);
  write_policy(out, policy);
}

PolicyTable load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string(), ErrorCode::kIo);
  return read_policy(in);
}

}  // namespace gasp
