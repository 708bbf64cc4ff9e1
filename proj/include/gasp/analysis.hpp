#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gasp/grpo.hpp"
#include "gasp/guidance.hpp"
#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"

namespace gasp {

struct ScarcityReport {
  double p = 0.0;
  std::size_t group_size = 0;
  double exact_prob = 0.0;     // 1 - (1 - p)^G
  double linear_approx = 0.0;  // G p
  double relative_error = 0.0; // |linear - exact| / exact, 0 when exact == 0
};

ScarcityReport success_probability(double p, std::size_t g);

struct SnrInputs {
  std::size_t k = 0;
  std::size_t group_size = 0;
  double mu_diff_norm_sq = 0.0;
  double tr_sigma1 = 0.0;
  double tr_sigma0 = 0.0;
};

// ||mu1 - mu0||^2 / (tr S1 / k + tr S0 / (G - k)).
double snr_squared(const SnrInputs& in);

struct ClassStats {
  SnrInputs inputs;  // k and group_size left for the caller to set
  ScoreGradient mu1;
  ScoreGradient mu0;
  std::size_t n1 = 0;
  std::size_t n0 = 0;
};

// Class-conditional means and trace covariances of per-trajectory score
// vectors (traj_score) pooled over all members of all groups.
ClassStats estimate_class_stats(std::span<const TrajectoryGroup> groups,
                                const PolicyTable& policy);

// Dense-vector form of the same estimator: rows of `scores` with reward 1
// and 0. Exposed for planted-data tests.
ClassStats estimate_class_stats(const Eigen::MatrixXd& scores,
                                std::span<const int> rewards);

struct GainPrediction {
  double eta = 0.0;
  double omega = 0.0;
  double target_likelihood = 0.0;
  double score_norm_sq = 0.0;
  double q_hat = 0.0;
  double predicted_gain = 0.0;
};

// eta * omega * pi(w) * q_hat * ||sum_t grad log pi(a_t | s_t)||^2.
GainPrediction predict_first_order_gain(const PolicyTable& policy,
                                        const GridWorld& world,
                                        const RepairSegment& segment,
                                        double eta, double omega, double q_hat);

// Success probability from the state the segment ends in, continuing with
// the policy for the rest of the horizon.
double estimate_q_hat(const GridWorld& world, const PolicyTable& policy,
                      const RepairSegment& segment, std::size_t n, std::uint64_t seed);

struct MeasuredGain {
  double before = 0.0;
  double after = 0.0;
  double delta = 0.0;
};

// J from `context` before and after one ascent step of size eta * omega on
// log pi(segment). Both estimates reuse the same n_eval rollout seeds.
MeasuredGain measure_gain(const GridWorld& world, const PolicyTable& policy,
                          const RepairSegment& segment, const MazeState& context,
                          double eta, double omega, std::size_t n_eval,
                          std::uint64_t seed);

struct OodTargetOptions {
  double min_likelihood_ratio = 10.0;
  // Exact segment length to search; 0 searches shortest + max_extra_moves.
  std::size_t length = 0;
  std::size_t max_extra_moves = 2;
  // Every candidate must be able to finish: require a path from the rail
  // entry to the goal within the remaining horizon.
  bool require_finishable = true;
  std::size_t max_candidates = 1'000'000;
};

// Enumerates repair paths from `context` to the rail and returns the most
// likely one whose likelihood is at most 1 / min_likelihood_ratio of the
// most likely `reference` segment. Throws kMazeTooConstrained if none exists.
RepairSegment make_ood_target(const GridWorld& world, const RailSet& rail,
                              const PolicyTable& policy, const MazeState& context,
                              std::span<const RepairSegment> reference,
                              const OodTargetOptions& options = {});

// All repair paths of the given length from `context` (first rail entry at
// the final move), in lexicographic action order. Throws kMazeTooConstrained
// past max_results paths.
std::vector<RepairSegment> enumerate_repairs(const GridWorld& world,
                                             const RailSet& rail,
                                             const MazeState& context,
                                             std::size_t length,
                                             std::size_t max_results = 1'000'000);

struct DriftReport {
  std::vector<std::pair<double, double>> per_row_shifts;  // (dm1, m2 post)
  std::pair<double, double> base_centroid;
  std::pair<double, double> post_centroid;
  double d = 0.0;
  Eigen::MatrixXd basis;  // columns: the two principal axes
};

// Shared two-component PCA over the stacked rows of both matrices, uncentered
// row projections, and the centroid distance between the two point clouds.
DriftReport pca_drift(const Eigen::MatrixXd& base_reps,
                      const Eigen::MatrixXd& post_reps);

// Logit rows of `policy` at the given cells, one row per cell.
Eigen::MatrixXd logit_rows(const PolicyTable& policy, const GridWorld& world,
                           std::span<const Cell> cells);

}  // namespace gasp
