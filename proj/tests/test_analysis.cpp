#include <cmath>
#include <random>
#include <set>

#include <Eigen/SVD>
#include <doctest.h>

#include "gasp/analysis.hpp"
#include "gasp/error.hpp"
#include "gasp/harness.hpp"

using namespace gasp;

namespace {

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIo;
}

Trajectory walk(const GridWorld& w, MazeState s, std::span<const Action> moves) {
  Trajectory t;
  t.start = s;
  t.states.push_back(s);
  for (Action a : moves) {
    s = step(w, s, a);
    t.moves.push_back(a);
    t.states.push_back(s);
  }
  return t;
}

RepairSegment as_segment(const Trajectory& t) {
  RepairSegment s;
  s.states.assign(t.states.begin(), t.states.end() - 1);
  s.actions = t.moves;
  s.rail_entry = t.states.back().cell;
  return s;
}

// Every action sequence of exactly `len` moves whose first rail cell is
// reached on the last move.
void dfs(const GridWorld& w, const RailSet& rail, MazeState s, std::size_t len,
         std::vector<Action>& path, std::set<std::vector<Action>>& out) {
  if (path.size() == len) return;
  for (Action a : kAllActions) {
    const MazeState n = step(w, s, a);
    path.push_back(a);
    if (rail.contains(n.cell)) {
      if (path.size() == len) out.insert(path);
    } else if (n.steps_taken < w.horizon()) {
      dfs(w, rail, n, len, path, out);
    }
    path.pop_back();
  }
}

}  // namespace

TEST_CASE("success probability examples and Monte-Carlo oracle") {
  CHECK(success_probability(0.5, 1).exact_prob == 0.5);
  const ScarcityReport r = success_probability(0.01, 64);
  CHECK(r.exact_prob == doctest::Approx(0.4744).epsilon(1e-3));
  CHECK(r.linear_approx == doctest::Approx(0.64));

  const ScarcityReport small = success_probability(0.001, 8);
  CHECK(small.exact_prob == doctest::Approx(0.007972).epsilon(1e-3));
  CHECK(small.linear_approx == doctest::Approx(0.008));
  CHECK(small.relative_error < 0.005);

  std::mt19937_64 gen(1);
  const int n = 1'000'000;
  for (double p : {0.001, 0.01, 0.1})
    for (int g : {8, 64}) {
      std::binomial_distribution<int> draws(g, p);
      int any = 0;
      for (int i = 0; i < n; ++i) any += draws(gen) > 0;
      const double exact = success_probability(p, static_cast<std::size_t>(g)).exact_prob;
      CHECK(std::abs(any / double(n) - exact) <= 3 * std::sqrt(exact * (1 - exact) / n));
    }

  CHECK_THROWS_AS(success_probability(1.5, 4), Error);
  CHECK_THROWS_AS(success_probability(0.5, 0), Error);
}

TEST_CASE("Bernoulli bound") {
  for (double p : {0.0, 1e-4, 0.01, 0.3, 0.9, 1.0})
    for (std::size_t g : {1u, 2u, 16u, 64u}) {
      const ScarcityReport r = success_probability(p, g);
      CHECK(r.exact_prob >= 0.0);
      CHECK(r.exact_prob <= 1.0);
      CHECK(r.relative_error >= 0.0);
      CHECK(r.exact_prob <= r.linear_approx + 1e-15);
      const bool equal = std::abs(r.exact_prob - r.linear_approx) <= 1e-15;
      CHECK(equal == (p == 0.0 || g == 1));
    }
}

TEST_CASE("snr closed-form examples") {
  CHECK(snr_squared({32, 64, 1.0, 1.0, 1.0}) == doctest::Approx(16.0));
  CHECK(snr_squared({1, 64, 1.0, 1.0, 1.0}) == doctest::Approx(1.0 / (1.0 + 1.0 / 63.0)));
  CHECK(snr_squared({1, 64, 1.0, 1.0, 1.0}) == doctest::Approx(0.9844).epsilon(1e-4));
  CHECK_THROWS_AS(snr_squared({0, 64, 1.0, 1.0, 1.0}), Error);
  CHECK_THROWS_AS(snr_squared({64, 64, 1.0, 1.0, 1.0}), Error);
  CHECK_THROWS_AS(snr_squared({3, 64, 1.0, -1.0, 1.0}), Error);
}

TEST_CASE("snr increases in k up to the crossover G sqrt(t1) / (sqrt(t1) + sqrt(t0))") {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  for (int i = 0; i < 300; ++i) {
    SnrInputs in{1, 3 + gen() % 62, u(gen), u(gen), u(gen)};
    const double g = static_cast<double>(in.group_size);
    const double kstar = g * std::sqrt(in.tr_sigma1) / (std::sqrt(in.tr_sigma1) + std::sqrt(in.tr_sigma0));
    for (std::size_t k = 1; k + 1 < in.group_size; ++k) {
      SnrInputs a = in, b = in;
      a.k = k;
      b.k = k + 1;
      if (static_cast<double>(k + 1) <= kstar) CHECK(snr_squared(b) > snr_squared(a));
      if (static_cast<double>(k) >= kstar) CHECK(snr_squared(b) < snr_squared(a));
    }
  }
  // Equal traces peak at G/2: past it, more successes lower the SNR.
  CHECK(snr_squared({40, 64, 1.0, 1.0, 1.0}) < snr_squared({32, 64, 1.0, 1.0, 1.0}));
}

TEST_CASE("class statistics recover planted means") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int d = 16, n = 4000;
  Eigen::VectorXd mu1 = Eigen::VectorXd::Zero(d), mu0 = Eigen::VectorXd::Zero(d);
  mu1(0) = 1.0;
  mu1(9) = -0.5;
  mu0(3) = 0.75;
  Eigen::MatrixXd scores(2 * n, d);
  std::vector<int> rewards(2 * n);
  for (int i = 0; i < 2 * n; ++i) {
    rewards[i] = i % 2;
    for (int c = 0; c < d; ++c) scores(i, c) = (i % 2 ? mu1(c) : mu0(c)) + noise(gen);
  }
  const ClassStats s = estimate_class_stats(scores, rewards);
  CHECK(s.n1 == n);
  CHECK(s.n0 == n);
  const double se = 1.0 / std::sqrt(double(n));
  for (int c = 0; c < d; ++c) {
    CHECK(std::abs(s.mu1.at(c / 8, action_from_index(c % 8)) - mu1(c)) <= 4 * se);
    CHECK(std::abs(s.mu0.at(c / 8, action_from_index(c % 8)) - mu0(c)) <= 4 * se);
  }
  CHECK(s.inputs.tr_sigma1 == doctest::Approx(d).epsilon(0.05));
  CHECK(s.inputs.tr_sigma0 == doctest::Approx(d).epsilon(0.05));
  // E ||mu1_hat - mu0_hat||^2 = ||mu1 - mu0||^2 + d / n1 + d / n0.
  const double expected = (mu1 - mu0).squaredNorm() + 2.0 * d / n;
  CHECK(std::abs(s.inputs.mu_diff_norm_sq - expected) <= 4 * 2 * std::sqrt((mu1 - mu0).squaredNorm() * 2.0 / n));

  for (int i = 0; i < 2 * n; ++i)
    for (int c = 0; c < d; ++c) scores(i, c) = noise(gen);
  const ClassStats same = estimate_class_stats(scores, rewards);
  CHECK(same.inputs.mu_diff_norm_sq <= 2.0 * d / n * 2.0);

  const std::vector<int> ones(2 * n, 1);
  CHECK(code_of([&] { estimate_class_stats(scores, ones); }) == ErrorCode::kInsufficientData);
}

TEST_CASE("class statistics from trajectory groups need both classes") {
  const GridWorld w = canonical_maze();
  const PolicyTable p(w.num_cells());
  Rng rng(4);
  const TrajectoryGroup g = sample_group(w, p, {w.misleading_start(), w.horizon() - 1}, 16, rng);
  CHECK(code_of([&] { estimate_class_stats(std::span(&g, 1), p); }) == ErrorCode::kInsufficientData);
}

TEST_CASE("first-order gain prediction") {
  const GridWorld w = canonical_maze();
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-1, 1);
  PolicyTable p(w.num_cells());
  for (std::size_t k = 0; k < p.num_keys(); ++k)
    for (double& x : p.logits(k)) x = u(gen);

  const Trajectory t = walk(w, {w.misleading_start(), 0}, std::vector<Action>{Action::kW, Action::kW, Action::kW});
  const RepairSegment seg = as_segment(t);
  const GainPrediction base = predict_first_order_gain(p, w, seg, 0.1, 1.0, 0.5);
  CHECK(base.target_likelihood == doctest::Approx(std::exp(segment_log_likelihood(p, w, seg))));
  CHECK(base.predicted_gain ==
        doctest::Approx(0.1 * 1.0 * base.target_likelihood * 0.5 * base.score_norm_sq));
  CHECK(predict_first_order_gain(p, w, seg, 0.1, 2.0, 0.5).predicted_gain == doctest::Approx(2 * base.predicted_gain));
  CHECK(predict_first_order_gain(p, w, seg, 0.3, 1.0, 0.5).predicted_gain == doctest::Approx(3 * base.predicted_gain));
  CHECK(predict_first_order_gain(p, w, seg, 0.1, 1.0, 0.25).predicted_gain == doctest::Approx(base.predicted_gain / 2));

  PolicyTable sat = p;
  for (std::size_t i = 0; i < seg.length(); ++i) sat.logits(w.index(seg.states[i].cell))[to_index(seg.actions[i])] = 60.0;
  const GainPrediction zero = predict_first_order_gain(sat, w, seg, 0.1, 1.0, 0.5);
  CHECK(zero.target_likelihood == doctest::Approx(1.0));
  CHECK(zero.score_norm_sq <= 1e-20);
  CHECK(zero.predicted_gain <= 1e-20);

  // Equal lengths: the prediction ratio is the likelihood ratio times the
  // score-norm ratio.
  const Trajectory t2 = walk(w, {w.misleading_start(), 0}, std::vector<Action>{Action::kW, Action::kSW, Action::kW});
  const RepairSegment other = as_segment(t2);
  const GainPrediction b = predict_first_order_gain(p, w, other, 0.1, 1.0, 0.5);
  CHECK(base.predicted_gain / b.predicted_gain ==
        doctest::Approx(base.target_likelihood / b.target_likelihood * base.score_norm_sq / b.score_norm_sq));

  PolicyTable dead = p;
  dead.logits(w.index(seg.states[0].cell))[to_index(seg.actions[0])] = -1e6;
  CHECK(code_of([&] { predict_first_order_gain(dead, w, seg, 0.1, 1.0, 0.5); }) == ErrorCode::kOffDistribution);
}

TEST_CASE("measured gain is zero for a zero step") {
  const GridWorld w = canonical_maze();
  const PolicyTable p(w.num_cells());
  const Trajectory t = walk(w, {{8, 3}, 0}, std::vector<Action>{Action::kSW});
  const MeasuredGain m = measure_gain(w, p, as_segment(t), {{8, 3}, 0}, 0.0, 1.0, 2000, 6);
  CHECK(m.delta == 0.0);
  CHECK(m.before == m.after);
}

TEST_CASE("repair enumeration matches an independent search") {
  const GridWorld w = canonical_maze();
  const RailSet rail(w, std::vector<Cell>{Cell{8, 5}, Cell{7, 5}, Cell{6, 5}});
  const MazeState m{w.misleading_start(), 0};
  std::size_t most = 0, most_len = 0;
  for (std::size_t len = 1; len <= 7; ++len) {
    std::set<std::vector<Action>> oracle;
    std::vector<Action> path;
    dfs(w, rail, m, len, path, oracle);
    const auto found = enumerate_repairs(w, rail, m, len);
    std::set<std::vector<Action>> got;
    for (const RepairSegment& s : found) {
      got.insert(s.actions);
      CHECK(rail.contains(s.rail_entry));
      CHECK_FALSE(rail.contains(s.states.front().cell));
    }
    CAPTURE(len);
    if (oracle.size() > most) most = oracle.size(), most_len = len;
    CHECK(got.size() == found.size());
    CHECK(got == oracle);
  }
  REQUIRE(most >= 2);
  CHECK(code_of([&] { enumerate_repairs(w, rail, m, most_len, most - 1); }) == ErrorCode::kMazeTooConstrained);
}

TEST_CASE("off-distribution target: likelihood gap, validity, and the enumeration oracle") {
  const GridWorld w = canonical_maze();
  const RailResult base = train_rail(w, ExperimentConfig{}, 42);
  const MazeState m{w.misleading_start(), 0};
  std::size_t shortest = 0;
  for (std::size_t len = 1; len < 40 && shortest == 0; ++len)
    if (!enumerate_repairs(w, base.rail, m, len).empty()) shortest = len;
  // References: the shortest repairs plus the policy's own harvest.
  std::vector<RepairSegment> refs = enumerate_repairs(w, base.rail, m, shortest);
  for (const RepairSegment& s : harvest_distinct(w, base.policy, base.rail, m, 1000, 7)) refs.push_back(s);
  double best_ref = -1e300;
  for (const RepairSegment& s : refs) best_ref = std::max(best_ref, segment_log_likelihood(base.policy, w, s));

  const RepairSegment target = make_ood_target(w, base.rail, base.policy, m, refs);
  const double ll = segment_log_likelihood(base.policy, w, target);
  CHECK(ll <= best_ref - std::log(10.0) + 1e-12);
  CHECK_FALSE(base.rail.contains(target.states.front().cell));
  for (std::size_t i = 0; i < target.length(); ++i) {
    const MazeState next = step(w, target.states[i], target.actions[i]);
    if (i + 1 < target.length()) {
      CHECK(next == target.states[i + 1]);
      CHECK_FALSE(base.rail.contains(next.cell));
    } else {
      CHECK(next.cell == target.rail_entry);
      CHECK(base.rail.contains(next.cell));
    }
  }

  // Oracle: most likely finishable repair within shortest + 2 moves under the cap.
  double oracle = -1e300;
  for (std::size_t len = shortest; len <= shortest + 2; ++len)
    for (const RepairSegment& s : enumerate_repairs(w, base.rail, m, len)) {
      const int used = s.states.back().steps_taken + 1;
      const auto togo = w.shortest_path(s.rail_entry, w.goal());
      if (!togo || used + *togo > w.horizon()) continue;
      const double l = segment_log_likelihood(base.policy, w, s);
      if (l <= best_ref - std::log(10.0)) oracle = std::max(oracle, l);
    }
  CHECK(ll == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("off-distribution target fails when the only repair is the reference") {
  const GridWorld w = parse_maze("#######\n#M.S.G#\n#######\n");
  const RailSet rail(w, std::vector<Cell>{Cell{1, 3}, Cell{1, 4}, Cell{1, 5}});
  const PolicyTable p(w.num_cells());
  const MazeState m{w.misleading_start(), 0};
  // Two moves east is the only two-move repair; longer ones bump the walls.
  OodTargetOptions opt;
  opt.length = 2;
  const auto refs = enumerate_repairs(w, rail, m, 2);
  REQUIRE(refs.size() == 1);
  CHECK(code_of([&] { make_ood_target(w, rail, p, m, refs, opt); }) == ErrorCode::kMazeTooConstrained);
}

TEST_CASE("pca drift") {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd base(20, 8);
  for (Eigen::Index i = 0; i < base.rows(); ++i)
    for (Eigen::Index j = 0; j < base.cols(); ++j) base(i, j) = n01(gen) * (j < 3 ? 3.0 : 0.3);

  const DriftReport same = pca_drift(base, base);
  CHECK(same.d == 0.0);
  for (const auto& [dm1, m2] : same.per_row_shifts) CHECK(dm1 == 0.0);

  Eigen::RowVectorXd v(8);
  for (Eigen::Index j = 0; j < 8; ++j) v(j) = n01(gen);
  const Eigen::MatrixXd post = base.rowwise() + v;
  const DriftReport moved = pca_drift(base, post);

  Eigen::MatrixXd stacked(40, 8);
  stacked << base, post;
  const Eigen::MatrixXd centered = stacked.rowwise() - stacked.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::MatrixXd plane = svd.matrixV().leftCols(2);
  CHECK(moved.d == doctest::Approx((v * plane).norm()).epsilon(1e-9));
  CHECK(pca_drift(post, base).d == doctest::Approx(moved.d).epsilon(1e-12));
  CHECK(moved.d >= 0.0);

  Eigen::MatrixXd flat(10, 8);
  for (Eigen::Index i = 0; i < 10; ++i) flat.row(i) = Eigen::RowVectorXd::Constant(8, double(i));
  CHECK(code_of([&] { pca_drift(flat, flat); }) == ErrorCode::kDegenerateProbeSet);
  CHECK_THROWS_AS(pca_drift(base, base.topRows(5)), Error);
}
