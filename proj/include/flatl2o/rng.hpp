// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace flatl2o::rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Hash a (seed, path...) tuple into a fresh stream seed. Used to derive
/// independent streams per (experiment seed, replicate id, estimator tag).
inline std::uint64_t derive(std::uint64_t seed,
                            std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = seed ^ 0xd1b54a32d192ed03ULL;
  for (std::uint64_t p : path) {
    s ^= splitmix64(s) + p;
    splitmix64(s);
  }
  return splitmix64(s);
}

/// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
/// bit-reproducible across standard libraries and platforms.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) {
    for (auto& w : s_) w = splitmix64(seed);
    cached_normal_valid_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (cached_normal_valid_) {
      cached_normal_valid_ = false;
      return cached_normal_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(phi);
    cached_normal_valid_ = true;
    return r * std::cos(phi);
  }

  /// Rademacher +/-1.
  double sign() { return (next_u64() & 1ULL) ? 1.0 : -1.0; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool cached_normal_valid_ = false;
};

}  // namespace flatl2o::rng
