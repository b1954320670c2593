#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "sartm/config.hpp"

SARTM_NS_BEGIN

// Deterministic fixed-width RNG (splitmix64). Distributions are implemented
// here rather than with <random> adapters because the standard distributions
// are not bit-reproducible across library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection-free multiply-shift (Lemire); bias is negligible for the
    // small ranges used here and the mapping is platform-stable.
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Named sub-stream: hashes (seed, name) so that e.g. the shuffle stream and
  // the init stream never interact.
  static Rng stream(uint64_t seed, std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ull ^ seed;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return Rng(h);
  }

  static Rng stream(uint64_t seed, std::string_view name, uint64_t index) {
    Rng base = stream(seed, name);
    base.state_ ^= 0x9e3779b97f4a7c15ull * (index + 1);
    return base;
  }

 private:
  uint64_t state_;
};

SARTM_NS_END
