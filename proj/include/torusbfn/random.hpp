#pragma once

#include <cstdint>
#include <random>

namespace torusbfn {

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates (root, index) pairs so that every
// trajectory or worker gets an independent stream regardless of scheduling.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t root, std::uint64_t index) {
  return Rng(derive_seed(root, index));
}

/// Uniform draw on [0, 1).
inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace torusbfn
