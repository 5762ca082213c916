#pragma once

#include <cstdint>
#include <random>

namespace fiberseg {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; derives independent substream seeds from (seed, stream).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi_inclusive) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi_inclusive)(rng);
}

}  // namespace fiberseg
