#include "gasp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "gasp/error.hpp"
#include "gasp/kernels.hpp"

namespace gasp {

ScarcityReport success_probability(double p, std::size_t g) {
  require(p >= 0.0 && p <= 1.0, "success_probability: p must be in [0, 1]");
  require(g >= 1, "success_probability: G must be at least 1");
  ScarcityReport r;
  r.p = p;
  r.group_size = g;
  // log1p/expm1 keep precision when p is tiny.
  r.exact_prob = p == 1.0 ? 1.0
                          : -std::expm1(static_cast<double>(g) * std::log1p(-p));
  r.linear_approx = static_cast<double>(g) * p;
  r.relative_error =
      r.exact_prob > 0.0 ? std::abs(r.linear_approx - r.exact_prob) / r.exact_prob : 0.0;
  return r;
}

double snr_squared(const SnrInputs& in) {
  if (in.k == 0 || in.k >= in.group_size) {
    fail(ErrorCode::kDegenerateGroup,
         "snr_squared: k must satisfy 1 <= k <= G - 1");
  }
  require(in.tr_sigma1 >= 0.0 && in.tr_sigma0 >= 0.0,
          "snr_squared: traces must be non-negative");
  require(in.mu_diff_norm_sq >= 0.0, "snr_squared: ||mu diff||^2 must be non-negative");
  const double k = static_cast<double>(in.k);
  const double rest = static_cast<double>(in.group_size - in.k);
  const double noise = in.tr_sigma1 / k + in.tr_sigma0 / rest;
  require(noise > 0.0, "snr_squared: zero noise", ErrorCode::kInsufficientData);
  return in.mu_diff_norm_sq / noise;
}

namespace {

void finish_class(ClassStats& s) {
  require(s.n1 > 0 && s.n0 > 0,
          "estimate_class_stats: need both successes and failures",
          ErrorCode::kInsufficientData);
}

double trace_cov(const std::vector<ScoreGradient>& xs, const ScoreGradient& mu) {
  if (xs.size() < 2) return 0.0;
  double total = 0.0;
  for (const ScoreGradient& x : xs) {
    ScoreGradient d = x;
    d.accumulate(mu, -1.0);
    total += d.squared_norm();
  }
  return total / static_cast<double>(xs.size() - 1);
}

}  // namespace

ClassStats estimate_class_stats(std::span<const TrajectoryGroup> groups,
                                const PolicyTable& policy) {
  std::vector<ScoreGradient> s1;
  std::vector<ScoreGradient> s0;
  ClassStats out;
  for (const TrajectoryGroup& g : groups) {
    require(g.tokens.size() == g.rewards.size(), "estimate_class_stats: ragged group");
    if (out.inputs.group_size == 0) out.inputs.group_size = g.group_size();
    for (std::size_t i = 0; i < g.group_size(); ++i) {
      ScoreGradient s = traj_score(policy, g.tokens[i]);
      (g.rewards[i] > 0.5 ? s1 : s0).push_back(std::move(s));
    }
  }
  out.n1 = s1.size();
  out.n0 = s0.size();
  finish_class(out);
  for (const auto& s : s1) out.mu1.accumulate(s, 1.0 / static_cast<double>(out.n1));
  for (const auto& s : s0) out.mu0.accumulate(s, 1.0 / static_cast<double>(out.n0));
  ScoreGradient diff = out.mu1;
  diff.accumulate(out.mu0, -1.0);
  out.inputs.mu_diff_norm_sq = diff.squared_norm();
  out.inputs.tr_sigma1 = trace_cov(s1, out.mu1);
  out.inputs.tr_sigma0 = trace_cov(s0, out.mu0);
  return out;
}

ClassStats estimate_class_stats(const Eigen::MatrixXd& scores,
                                std::span<const int> rewards) {
  require(static_cast<std::size_t>(scores.rows()) == rewards.size(),
          "estimate_class_stats: one reward per row");
  ClassStats out;
  std::vector<Eigen::Index> i1;
  std::vector<Eigen::Index> i0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    (rewards[i] != 0 ? i1 : i0).push_back(static_cast<Eigen::Index>(i));
  }
  out.n1 = i1.size();
  out.n0 = i0.size();
  finish_class(out);
  auto stats = [&](const std::vector<Eigen::Index>& idx, ScoreGradient& mu) {
    Eigen::MatrixXd block(static_cast<Eigen::Index>(idx.size()), scores.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      block.row(static_cast<Eigen::Index>(r)) = scores.row(idx[r]);
    }
    const Eigen::RowVectorXd m = block.colwise().mean();
    for (Eigen::Index c = 0; c < m.size(); ++c) {
      mu.add(static_cast<std::size_t>(c) / kNumActions,
             action_from_index(static_cast<std::size_t>(c) % kNumActions), m(c));
    }
    if (idx.size() < 2) return std::make_pair(m, 0.0);
    const double tr = (block.rowwise() - m).squaredNorm() /
                      static_cast<double>(idx.size() - 1);
    return std::make_pair(m, tr);
  };
  const auto [m1, t1] = stats(i1, out.mu1);
  const auto [m0, t0] = stats(i0, out.mu0);
  out.inputs.mu_diff_norm_sq = (m1 - m0).squaredNorm();
  out.inputs.tr_sigma1 = t1;
  out.inputs.tr_sigma0 = t0;
  return out;
}

GainPrediction predict_first_order_gain(const PolicyTable& policy,
                                        const GridWorld& world,
                                        const RepairSegment& segment,
                                        double eta, double omega, double q_hat) {
  require(segment.length() > 0, "predict_first_order_gain: empty segment");
  require(q_hat >= 0.0 && q_hat <= 1.0, "predict_first_order_gain: q_hat must be in [0, 1]");
  const auto decisions = segment.decisions(world);
  GainPrediction g;
  g.eta = eta;
  g.omega = omega;
  g.q_hat = q_hat;
  g.target_likelihood = std::exp(sequence_log_prob(policy, decisions));
  require(g.target_likelihood > 0.0 && std::isfinite(g.target_likelihood),
          "predict_first_order_gain: segment likelihood underflows",
          ErrorCode::kOffDistribution);
  g.score_norm_sq = sequence_score(policy, decisions).squared_norm();
  g.predicted_gain = eta * omega * g.target_likelihood * q_hat * g.score_norm_sq;
  return g;
}

double estimate_q_hat(const GridWorld& world, const PolicyTable& policy,
                      const RepairSegment& segment, std::size_t n, std::uint64_t seed) {
  require(segment.length() > 0 && n > 0, "estimate_q_hat: empty segment or n = 0");
  const MazeState end = step(world, segment.states.back(), segment.actions.back());
  return static_cast<double>(kernels::count_successes_parallel(world, policy, end, n, seed)) /
         static_cast<double>(n);
}

MeasuredGain measure_gain(const GridWorld& world, const PolicyTable& policy,
                          const RepairSegment& segment, const MazeState& context,
                          double eta, double omega, std::size_t n_eval,
                          std::uint64_t seed) {
  require(n_eval > 0, "measure_gain: n_eval must be positive");
  const std::span<const RepairSegment> one(&segment, 1);
  const PolicyTable after = apply_update(policy, guide_gradient(policy, world, one), eta * omega);
  const double n = static_cast<double>(n_eval);
  MeasuredGain m;
  m.before = static_cast<double>(
                 kernels::count_successes_parallel(world, policy, context, n_eval, seed)) / n;
  m.after = static_cast<double>(
                kernels::count_successes_parallel(world, after, context, n_eval, seed)) / n;
  m.delta = m.after - m.before;
  return m;
}

namespace {

// Moves needed from each open cell to reach any rail cell.
std::vector<int> distance_to_rail(const GridWorld& world, const RailSet& rail) {
  std::vector<int> dist(world.num_cells(), std::numeric_limits<int>::max());
  std::deque<Cell> queue;
  for (Cell c : rail.cells()) {
    dist[world.index(c)] = 0;
    queue.push_back(c);
  }
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (Action a : kAllActions) {
      const Cell n = world.move(c, a);
      if (n == c || dist[world.index(n)] != std::numeric_limits<int>::max()) continue;
      dist[world.index(n)] = dist[world.index(c)] + 1;
      queue.push_back(n);
    }
  }
  return dist;
}

void extend(const GridWorld& world, const RailSet& rail, const std::vector<int>& dist,
            std::size_t remaining, std::size_t max_results, RepairSegment& partial,
            std::vector<RepairSegment>& out) {
  const MazeState s = partial.states.back();
  if (s.steps_taken >= world.horizon()) return;
  for (Action a : kAllActions) {
    const MazeState n = step(world, s, a);
    const bool on_rail = rail.contains(n.cell);
    if (on_rail != (remaining == 1)) continue;
    if (!on_rail && dist[world.index(n.cell)] > static_cast<int>(remaining - 1)) continue;
    partial.actions.push_back(a);
    if (on_rail) {
      require(out.size() < max_results,
              "enumerate_repairs: more than " + std::to_string(max_results) + " paths",
              ErrorCode::kMazeTooConstrained);
      RepairSegment seg = partial;
      seg.rail_entry = n.cell;
      out.push_back(std::move(seg));
    } else {
      partial.states.push_back(n);
      extend(world, rail, dist, remaining - 1, max_results, partial, out);
      partial.states.pop_back();
    }
    partial.actions.pop_back();
  }
}

}  // namespace

std::vector<RepairSegment> enumerate_repairs(const GridWorld& world,
                                             const RailSet& rail,
                                             const MazeState& context,
                                             std::size_t length,
                                             std::size_t max_results) {
  require(world.valid(context), "enumerate_repairs: invalid context");
  require(!rail.contains(context.cell), "enumerate_repairs: context is on the rail");
  std::vector<RepairSegment> out;
  if (length == 0) return out;
  const auto dist = distance_to_rail(world, rail);
  RepairSegment partial;
  partial.states.push_back(context);
  extend(world, rail, dist, length, max_results, partial, out);
  return out;
}

RepairSegment make_ood_target(const GridWorld& world, const RailSet& rail,
                              const PolicyTable& policy, const MazeState& context,
                              std::span<const RepairSegment> reference,
                              const OodTargetOptions& options) {
  require(!reference.empty(), "make_ood_target: need reference segments");
  require(options.min_likelihood_ratio >= 1.0,
          "make_ood_target: likelihood ratio must be at least 1");
  double best_ref = -std::numeric_limits<double>::infinity();
  for (const RepairSegment& r : reference) {
    best_ref = std::max(best_ref, segment_log_likelihood(policy, world, r));
  }
  const double bound = best_ref - std::log(options.min_likelihood_ratio);

  std::size_t lo = options.length;
  std::size_t hi = options.length;
  if (options.length == 0) {
    const auto dist = distance_to_rail(world, rail);
    const int d = dist[world.index(context.cell)];
    require(d != std::numeric_limits<int>::max(), "make_ood_target: rail unreachable",
            ErrorCode::kMazeTooConstrained);
    lo = static_cast<std::size_t>(d);
    hi = lo + options.max_extra_moves;
  }

  std::optional<RepairSegment> best;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t len = lo; len <= hi; ++len) {
    for (RepairSegment& cand : enumerate_repairs(world, rail, context, len, options.max_candidates)) {
      const double ll = segment_log_likelihood(policy, world, cand);
      if (ll > bound || ll <= best_ll) continue;
      if (options.require_finishable) {
        const MazeState end = step(world, cand.states.back(), cand.actions.back());
        const auto togo = world.shortest_path(end.cell, world.goal());
        if (!togo || end.steps_taken + *togo > world.horizon()) continue;
      }
      best_ll = ll;
      cand.harvest_log_likelihood = ll;
      best = std::move(cand);
    }
  }
  if (!best) {
    fail(ErrorCode::kMazeTooConstrained,
         "make_ood_target: no repair path meets the likelihood-ratio bound");
  }
  return *best;
}

DriftReport pca_drift(const Eigen::MatrixXd& base_reps,
                      const Eigen::MatrixXd& post_reps) {
  require(base_reps.rows() == post_reps.rows() && base_reps.cols() == post_reps.cols(),
          "pca_drift: matrices must share shape");
  require(base_reps.rows() > 0 && base_reps.cols() >= 2, "pca_drift: need rows and 2+ columns");
  Eigen::MatrixXd stacked(2 * base_reps.rows(), base_reps.cols());
  stacked << base_reps, post_reps;
  const Eigen::RowVectorXd mean = stacked.colwise().mean();
  const Eigen::MatrixXd centered = stacked.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  require(eig.info() == Eigen::Success, "pca_drift: eigen decomposition failed",
          ErrorCode::kDegenerateProbeSet);
  const Eigen::Index n = cov.rows();
  const double l1 = eig.eigenvalues()(n - 1);
  const double l2 = eig.eigenvalues()(n - 2);
  require(l1 > 0.0 && l2 > 1e-12 * l1, "pca_drift: probe rows span fewer than 2 dimensions",
          ErrorCode::kDegenerateProbeSet);

  DriftReport r;
  r.basis.resize(base_reps.cols(), 2);
  for (Eigen::Index k = 0; k < 2; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(n - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    r.basis.col(k) = v;
  }
  const Eigen::MatrixXd mb = base_reps * r.basis;
  const Eigen::MatrixXd mp = post_reps * r.basis;
  for (Eigen::Index i = 0; i < mb.rows(); ++i) {
    r.per_row_shifts.push_back({mp(i, 0) - mb(i, 0), mp(i, 1)});
  }
  r.base_centroid = {0.0, mb.col(1).mean()};
  r.post_centroid = {(mp.col(0) - mb.col(0)).mean(), mp.col(1).mean()};
  r.d = std::hypot(r.post_centroid.first - r.base_centroid.first,
                   r.post_centroid.second - r.base_centroid.second);
  return r;
}

Eigen::MatrixXd logit_rows(const PolicyTable& policy, const GridWorld& world,
                           std::span<const Cell> cells) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(cells.size()),
                    static_cast<Eigen::Index>(kNumActions));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const ActionRow& row = policy.logits(world.index(cells[i]));
    for (std::size_t j = 0; j < kNumActions; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
  }
  return m;
}

}  // namespace gasp
