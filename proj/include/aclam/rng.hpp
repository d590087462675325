#pragma once

// Counter-based pseudo-random streams.
//
// Every draw is splitmix64(key + counter * golden), so a stream is fully
// described by (key, counter) and independent streams are obtained by hashing
// identifiers into a new key. Distributions are implemented here rather than
// through <random> because the standard distributions are not bit-identical
// across library implementations.

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace aclam {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of a list of integers, used to derive stream keys.
inline std::uint64_t hash_ids(std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (std::uint64_t id : ids) {
    h = splitmix64(h ^ splitmix64(id));
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t key = 0) : key_(key) {}

  std::uint64_t next_u64() {
    ++counter_;
    return splitmix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) {
      return 0;
    }
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) {
      x = next_u64();
    }
    return x % n;
  }

  /// Uniform integer in [lo, hi] inclusive.
  long long between(long long lo, long long hi) {
    return lo + static_cast<long long>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// A new independent stream keyed on this stream's key and `id`.
  Rng derive(std::uint64_t id) const { return Rng(hash_ids({key_, id})); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace aclam
