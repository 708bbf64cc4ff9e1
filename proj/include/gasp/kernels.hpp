#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gasp/gridworld.hpp"
#include "gasp/policy.hpp"

namespace gasp::kernels {

// Data-parallel rollout kernels. Item i always draws from
// Rng(derive_seed(base_seed, i)), so every *_parallel kernel returns exactly
// what its *_serial reference returns, for any thread count.

std::vector<Trajectory> rollout_batch_serial(const GridWorld& world,
                                             const PolicyTable& policy,
                                             std::span<const MazeState> starts,
                                             std::uint64_t base_seed);
std::vector<Trajectory> rollout_batch_parallel(const GridWorld& world,
                                               const PolicyTable& policy,
                                               std::span<const MazeState> starts,
                                               std::uint64_t base_seed);

// Number of successful rollouts out of n from one start.
std::size_t count_successes_serial(const GridWorld& world,
                                   const PolicyTable& policy,
                                   const MazeState& start, std::size_t n,
                                   std::uint64_t base_seed);
std::size_t count_successes_parallel(const GridWorld& world,
                                     const PolicyTable& policy,
                                     const MazeState& start, std::size_t n,
                                     std::uint64_t base_seed);

// Number of groups (out of n_groups) of `group_size` Bernoulli(p) draws that
// contain at least one success.
std::size_t count_nonempty_groups_serial(double p, std::size_t group_size,
                                         std::size_t n_groups,
                                         std::uint64_t base_seed);
std::size_t count_nonempty_groups_parallel(double p, std::size_t group_size,
                                           std::size_t n_groups,
                                           std::uint64_t base_seed);

int max_threads();

}  // namespace gasp::kernels
