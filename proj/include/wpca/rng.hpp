#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace wpca {

// splitmix64 step, used for seed mixing/derivation only.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Order-sensitive combine of two 64-bit values into a derived seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a;
  std::uint64_t h = splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return splitmix64(s);
}

// Derives a per-architecture seed from a base seed and an integer id sequence
// (genome genes or an encoded config). Same inputs give the same seed on every
// platform.
inline std::uint64_t derive_seed(std::uint64_t base, std::span<const int> ids) {
  std::uint64_t h = mix_seed(base, 0x77504341ull);  // "WPCA"
  for (int v : ids) h = mix_seed(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(v)));
  return h;
}

// Same derivation for architectures identified by a string id.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view id) {
  std::uint64_t h = mix_seed(base, 0x77504341ull);
  for (char c : id) h = mix_seed(h, static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
  return h;
}

// Deterministic RNG: std::mt19937_64 (whose output sequence is pinned by the
// standard) plus hand-rolled distribution adapters. std::uniform_*_distribution
// and std::normal_distribution are avoided because their algorithms differ
// between standard libraries.
class rng64 {
 public:
  explicit rng64(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // Unbiased integer in [0, n) via rejection sampling.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the sine partner is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Normal(0, stddev) rejected outside [-trunc, trunc] (absolute bound).
  double truncated_normal(double stddev, double trunc) {
    double x;
    do {
      x = stddev * normal();
    } while (x < -trunc || x > trunc);
    return x;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace wpca
