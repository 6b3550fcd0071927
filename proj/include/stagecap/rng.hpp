#pragma once

#include <cstdint>
#include <random>

namespace stagecap {

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a stream label, so that
/// callers can hand out per-purpose generators without sharing state.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace stagecap
