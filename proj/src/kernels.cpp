#include "gasp/kernels.hpp"

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gasp::kernels {

namespace {

bool any_success(double p, std::size_t group_size, Rng& rng) {
  bool hit = false;
  // Draw all G values even after a hit so the stream length is fixed.
  for (std::size_t j = 0; j < group_size; ++j) hit |= uniform01(rng) < p;
  return hit;
}

}  // namespace

std::vector<Trajectory> rollout_batch_serial(const GridWorld& world,
                                             const PolicyTable& policy,
                                             std::span<const MazeState> starts,
                                             std::uint64_t base_seed) {
  std::vector<Trajectory> out(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    Rng rng(derive_seed(base_seed, i));
    out[i] = rollout(world, policy, starts[i], rng);
  }
  return out;
}

std::vector<Trajectory> rollout_batch_parallel(const GridWorld& world,
                                               const PolicyTable& policy,
                                               std::span<const MazeState> starts,
                                               std::uint64_t base_seed) {
  std::vector<Trajectory> out(starts.size());
  const auto n = static_cast<std::int64_t>(starts.size());
#pragma omp parallel for schedule(static) if (n >= 8)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    Rng rng(derive_seed(base_seed, u));
    out[u] = rollout(world, policy, starts[u], rng);
  }
  return out;
}

std::size_t count_successes_serial(const GridWorld& world,
                                   const PolicyTable& policy,
                                   const MazeState& start, std::size_t n,
                                   std::uint64_t base_seed) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(base_seed, i));
    hits += static_cast<std::size_t>(rollout(world, policy, start, rng).reward);
  }
  return hits;
}

std::size_t count_successes_parallel(const GridWorld& world,
                                     const PolicyTable& policy,
                                     const MazeState& start, std::size_t n,
                                     std::uint64_t base_seed) {
  std::int64_t hits = 0;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) reduction(+ : hits) if (count >= 64)
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(base_seed, static_cast<std::size_t>(i)));
    hits += rollout(world, policy, start, rng).reward;
  }
  return static_cast<std::size_t>(hits);
}

std::size_t count_nonempty_groups_serial(double p, std::size_t group_size,
                                         std::size_t n_groups,
                                         std::uint64_t base_seed) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n_groups; ++i) {
    Rng rng(derive_seed(base_seed, i));
    hits += any_success(p, group_size, rng) ? 1 : 0;
  }
  return hits;
}

std::size_t count_nonempty_groups_parallel(double p, std::size_t group_size,
                                           std::size_t n_groups,
                                           std::uint64_t base_seed) {
  std::int64_t hits = 0;
  const auto count = static_cast<std::int64_t>(n_groups);
#pragma omp parallel for schedule(static) reduction(+ : hits)
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(base_seed, static_cast<std::size_t>(i)));
    hits += any_success(p, group_size, rng) ? 1 : 0;
  }
  return static_cast<std::size_t>(hits);
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace gasp::kernels
