#pragma once

#include <cstdint>
#include <random>

namespace spodnet {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; spreads nearby seeds over the whole state space.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

/// Stream for entry `index` of a seeded collection: seed + index, hashed.
inline Rng child_rng(std::uint64_t seed, std::uint64_t index) {
  return make_rng(seed + index);
}

}  // namespace spodnet
