#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace flamingo {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Seed of a named sub-stream ("data", "init", "shuffle", ...) of a run seed.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name,
                                    std::uint64_t counter = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a(name)) + counter);
}

inline Rng make_rng(std::uint64_t seed, std::string_view name, std::uint64_t counter = 0) {
  return Rng(substream_seed(seed, name, counter));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline bool bernoulli(Rng& rng, double p) { return p > 0.0 && uniform01(rng) < p; }

}  // namespace flamingo
