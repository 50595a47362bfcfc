#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sdmlm {

using Rng = std::mt19937_64;

/// FNV-1a, used for stream tags and config hashes.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// Independent stream for (seed, purpose, a, b).
inline Rng derive_stream(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  const std::uint64_t tag = fnv1a(purpose);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag),  static_cast<std::uint32_t>(tag >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
  return Rng(seq);
}

/// True with probability p (p = 0 never, p = 1 always).
inline bool bernoulli(Rng& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace sdmlm
