#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "uncspan/common.hpp"

namespace uncspan {

/// splitmix64 finalizer; good avalanche, cheap, and stateless.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from (seed, index). Used for
/// per-sample and per-epoch streams so results do not depend on
/// execution order or parallelism.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed ^ mix64(index + 0x632be59bd9b4e019ull));
}

/// Named derivation: every consumer of the master seed owns a label,
/// so adding a new stream never shifts existing ones.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                                 std::uint64_t index = 0) {
  return derive_seed(seed ^ fnv1a64(label), index);
}

inline std::mt19937_64 make_engine(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

}  // namespace uncspan
