#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "palnet/common.hpp"

// Deterministic random utilities. The mt19937_64 engine is fully specified by
// the standard; the distribution helpers below are hand-rolled because the
// std::*_distribution classes are implementation-defined, and the pipeline
// promises byte-identical artifacts for a given seed.

namespace palnet::rng {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Mixes a master seed with stream tags into an independent derived seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = master;
  std::uint64_t out = splitmix64(s);
  for (std::uint64_t t : tags) {
    s ^= t + 0x9E3779B97F4A7C15ull + (s << 6) + (s >> 2);
    out = splitmix64(s);
  }
  return out;
}

inline Engine make_engine(std::uint64_t master, std::initializer_list<std::uint64_t> tags = {}) {
  return Engine(derive_seed(master, tags));
}

/// Uniform double in [0, 1).
inline double uniform01(Engine& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

/// Unbiased uniform integer in [0, n).
inline std::uint64_t uniform_below(Engine& g, std::uint64_t n) {
  if (n == 0) throw Error("uniform_below: n must be positive");
  const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    std::uint64_t x = g();
    if (x >= threshold) return x % n;
  }
}

/// Standard normal via Box-Muller. Draws two variates per call, no cached spare.
inline double normal(Engine& g) {
  double u1 = uniform01(g);
  double u2 = uniform01(g);
  while (u1 <= 0.0) u1 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

inline double normal(Engine& g, double mean, double stddev) {
  return mean + stddev * normal(g);
}

/// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& v, Engine& g) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_below(g, i));
    std::swap(v[i - 1], v[j]);
  }
}

/// k distinct indices from [0, n), in draw order.
inline std::vector<std::size_t> sample_without_replacement(Engine& g, std::size_t n, std::size_t k) {
  if (k > n) throw Error("sample_without_replacement: k > n");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(uniform_below(g, n - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

}  // namespace palnet::rng
