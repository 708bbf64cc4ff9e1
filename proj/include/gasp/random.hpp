#pragma once

#include <cstdint>
#include <random>

namespace gasp {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed of the index-th independent stream under `base`. Batch kernels give
// item i the generator Rng(derive_seed(base, i)) so results do not depend on
// how items are scheduled across threads.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return mix_seed(base ^ mix_seed(index));
}

// Uniform in [0, 1) from the top 53 bits; identical on every standard library.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n) by rejection; n > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

}  // namespace gasp
