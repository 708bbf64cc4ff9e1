#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "gasp/error.hpp"
#include "gasp/harness.hpp"

using namespace gasp;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(std::string_view text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("parse_config defaults, sweeps and round trip") {
  CHECK(to_text(parse_config("")) == to_text(ExperimentConfig{}));
  CHECK(to_text(parse_config("# only a comment\n\n")) == to_text(ExperimentConfig{}));

  const ExperimentConfig c = parse_config("seeds = 42,52,62\nlr_agent = 2.5  # inline\nmode = recovery-grpo\n");
  CHECK(c.seeds == std::vector<std::uint64_t>{42, 52, 62});
  CHECK(c.lr_agent == 2.5);
  CHECK(c.mode == Mode::kRecoveryGrpo);

  ExperimentConfig d;
  d.lr_polluter = 0.1 + 0.2;
  d.guidance.lambda0 = 1.0 / 3.0;
  d.polluter_mode = PolluterMode::kFrozen;
  d.seeds = {7};
  CHECK(to_text(parse_config(to_text(d))) == to_text(d));
  CHECK(parse_config(to_text(d)).guidance.lambda0 == d.guidance.lambda0);

  std::size_t keys = 0;
  std::istringstream lines(to_text(d));
  for (std::string line; std::getline(lines, line);) keys += !line.empty();
  CHECK(keys == config_keys().size());
}

TEST_CASE("parse_config rejects bad input naming the key") {
  CHECK(error_of("lr_agent = -1").find("lr_agent") != std::string::npos);
  CHECK(error_of("lr_polluter = nan").find("lr_polluter") != std::string::npos);
  CHECK(error_of("group_size = 1").find("group_size") != std::string::npos);
  CHECK(error_of("learning_rate = 1").find("learning_rate") != std::string::npos);
  CHECK(error_of("seeds = ").find("seeds") != std::string::npos);
  CHECK(error_of("stage1_steps = many").find("stage1_steps") != std::string::npos);
  CHECK(error_of("mode = fast").find("mode") != std::string::npos);
  CHECK(error_of("no equals sign") != "");
}

TEST_CASE("two-stage runs: checkpoint grid, zero stage 2, invariants") {
  const GridWorld w = canonical_maze();
  ExperimentConfig c;
  c.stage2_steps = 40;
  const TrainingHistory h = run_two_stage(w, c, RecoveryMethod::kGuided, 42);
  REQUIRE(h.checkpoints.size() == 5);
  for (std::size_t i = 0; i < h.checkpoints.size(); ++i) {
    const Checkpoint& cp = h.checkpoints[i];
    CHECK(cp.step == 10 * i);
    for (double r : {cp.misleading_success, cp.clean_success})
      CHECK(std::abs(r * 10 - std::round(r * 10)) <= 1e-12);
  }
  CHECK(h.steps.size() == 40);
  CHECK_NOTHROW(check_invariants(h));

  c.stage2_steps = 0;
  const TrainingHistory zero = run_two_stage(w, c, RecoveryMethod::kGrpo, 42);
  CHECK(zero.checkpoints.size() == 1);
  CHECK(zero.steps.empty());

  TrainingHistory bad = h;
  bad.checkpoints[2].clean_success = 1.5;
  try {
    check_invariants(bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInvariantViolation);
  }
  bad = h;
  std::swap(bad.checkpoints[1], bad.checkpoints[2]);
  CHECK_THROWS_AS(check_invariants(bad), Error);
}

TEST_CASE("stage 1 below the threshold aborts") {
  ExperimentConfig c;
  c.stage1_steps = 5;
  try {
    train_rail(canonical_maze(), c, 42);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kStageOneFailed);
    CHECK(std::string(e.what()).find("seed 42") != std::string::npos);
  }
}

TEST_CASE("recovery methods share stage 1 and evaluation streams, and repeat exactly") {
  const GridWorld w = canonical_maze();
  ExperimentConfig c;
  c.stage2_steps = 30;
  const RailResult base = train_rail(w, c, 52);
  const TrainingHistory a = run_recovery(w, base, RecoveryMethod::kGrpo, c);
  const TrainingHistory b = run_recovery(w, base, RecoveryMethod::kGrpo, c);
  std::ostringstream x, y;
  write_checkpoints_csv(x, std::span(&a, 1));
  write_checkpoints_csv(y, std::span(&b, 1));
  CHECK(x.str() == y.str());
  CHECK(a.policy == b.policy);

  const TrainingHistory g = run_recovery(w, base, RecoveryMethod::kGuided, c);
  // Step 0 evaluates the shared base policy on the shared streams.
  CHECK(g.checkpoints.front().misleading_success == a.checkpoints.front().misleading_success);
  CHECK(g.checkpoints.front().clean_success == a.checkpoints.front().clean_success);

  const TrainingHistory o = run_recovery(w, base, RecoveryMethod::kOodClone, c);
  CHECK(o.method == "ood-clone");
  CHECK_NOTHROW(check_invariants(o));
}

TEST_CASE("csv schemas") {
  TrainingHistory h;
  h.seed = 3;
  h.method = "grpo";
  h.checkpoints.push_back({0, 0.5, 1.0, 0.25, 0.07, 2});
  StepRecord s;
  s.k = 2;
  s.group_size = 16;
  s.mean_reward = 0.125;
  h.steps.push_back(s);
  std::ostringstream a, b;
  write_checkpoints_csv(a, std::span(&h, 1));
  write_steps_csv(b, std::span(&h, 1));
  CHECK(a.str() ==
        "seed,method,step,misleading_success,clean_success,gradient_norm,lambda,buffer_size\n"
        "3,grpo,0,0.5,1,0.25,0.07,2\n");
  CHECK(b.str() ==
        "seed,method,step,role,k,group_size,mean_reward,gradient_norm,clipped_fraction,"
        "guide_grad_norm,lambda,buffer_size,harvested\n"
        "3,grpo,0,agent,2,16,0.125,0,0,0,0,0,0\n");
}

TEST_CASE("provenance files and hashing") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");

  const fs::path dir = fs::temp_directory_path() / "gasp_provenance_test";
  fs::remove_all(dir);
  ExperimentConfig c;
  c.seeds = {1, 2};
  const GridWorld w = load_world(c);
  write_provenance(dir, c, w);
  CHECK(parse_config(read_file(dir / "config.txt")).seeds == c.seeds);
  CHECK(load_maze(dir / "maze.txt") == w);
  CHECK(read_file(dir / "maze.sha256").substr(0, 64) == sha256_hex(read_file(dir / "maze.txt")));

  ExperimentConfig from_file;
  from_file.maze = GASP_DATA_DIR "/canonical_maze.txt";
  CHECK(load_world(from_file) == w);
  fs::remove_all(dir);
}

TEST_CASE("rail pool holds successful clean-start rollouts") {
  const GridWorld w = canonical_maze();
  const RailResult base = train_rail(w, ExperimentConfig{}, 62);
  const auto pool = rail_pool(w, base.policy, 6, 3);
  CHECK(pool.size() == 6);
  for (const Trajectory& t : pool) {
    CHECK(t.reward == 1);
    CHECK(t.start == MazeState{w.clean_start(), 0});
  }
}
