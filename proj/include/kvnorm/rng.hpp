// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace kvnorm {

// Deterministic 64-bit PRNG used for every seeded behavior in the project.
//
// Contract (normative for all seeded outputs, including checkpoints and CSVs):
//   - stream:   splitmix64 over an incrementing state
//   - uniform:  (next_u64() >> 11) * 2^-53, giving a double in [0, 1)
//   - normal:   Box-Muller on consecutive pairs of uniform draws; each pair
//               (u1, u2) yields first the cosine branch, then the sine branch
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1) with 53 random mantissa bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n) via 128-bit multiply-shift.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal deviate. Consumes two uniforms per pair of outputs;
  // log(1 - u1) is finite because u1 < 1.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stable mixer for deriving independent sub-streams from a base seed,
// e.g. per (layer, head, step) eviction sampling or per-sample task seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
  SplitMix64 rng(seed ^ (a * 0xD6E8FEB86659FD93ULL) ^
                 (b * 0xA5A5A5A5A5A5A5A5ULL) ^ (c * 0xC2B2AE3D27D4EB4FULL));
  return rng.next_u64();
}

}  // namespace kvnorm
