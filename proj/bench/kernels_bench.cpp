#include <vector>

#include <benchmark/benchmark.h>

#include "gasp/gridworld.hpp"
#include "gasp/kernels.hpp"
#include "gasp/policy.hpp"

namespace {

using namespace gasp;

const GridWorld& world() {
  static const GridWorld w = canonical_maze();
  return w;
}

std::vector<MazeState> starts(std::size_t n) {
  return std::vector<MazeState>(n, MazeState{world().misleading_start(), 0});
}

void BM_RolloutSerial(benchmark::State& state) {
  const PolicyTable policy(world().num_cells());
  const auto s = starts(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::rollout_batch_serial(world(), policy, s, 7));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_RolloutParallel(benchmark::State& state) {
  const PolicyTable policy(world().num_cells());
  const auto s = starts(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::rollout_batch_parallel(world(), policy, s, 7));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_CountSuccessesSerial(benchmark::State& state) {
  const PolicyTable policy(world().num_cells());
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::count_successes_serial(world(), policy, {world().clean_start(), 0}, n, 11));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_CountSuccessesParallel(benchmark::State& state) {
  const PolicyTable policy(world().num_cells());
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::count_successes_parallel(world(), policy, {world().clean_start(), 0}, n, 11));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_NonemptyGroupsSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::count_nonempty_groups_serial(0.01, 16, n, 3));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_NonemptyGroupsParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::count_nonempty_groups_parallel(0.01, 16, n, 3));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_RolloutSerial)->Arg(64)->Arg(1024);
BENCHMARK(BM_RolloutParallel)->Arg(64)->Arg(1024);
BENCHMARK(BM_CountSuccessesSerial)->Arg(1024)->Arg(16384);
BENCHMARK(BM_CountSuccessesParallel)->Arg(1024)->Arg(16384);
BENCHMARK(BM_NonemptyGroupsSerial)->Arg(100000);
BENCHMARK(BM_NonemptyGroupsParallel)->Arg(100000);

BENCHMARK_MAIN();
