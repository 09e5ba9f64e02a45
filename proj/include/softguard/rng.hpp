#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

namespace softguard {

/// Seedable 64-bit generator with a fully specified output stream.
///
/// The engine is std::mt19937_64, whose sequence the C++ standard pins down
/// exactly. The standard distributions are implementation-defined, so every
/// derived draw below is written out by hand:
///   uniform()  = (u64 >> 11) * 2^-53, in [0, 1)
///   below(n)   = u64 mod n, rejecting u64 < (2^64 mod n)
///   normal()   = Box-Muller, sqrt(-2 ln(1 - u1)) * cos(2 pi u2)
/// Independent streams per (seed, index, domain) are seeded with three
/// rounds of SplitMix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  /// A stream that depends only on (seed, index, domain).
  static Rng stream(std::uint64_t seed, std::uint64_t index,
                    std::uint64_t domain = 0) {
    const std::uint64_t s =
        splitmix64(splitmix64(splitmix64(seed) ^ index) ^ domain);
    return Rng(s);
  }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    // Values below 2^64 mod n would bias the low residues.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  /// Integer in [lo, hi].
  int range(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace softguard
