#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace cotlab {

/**
 * Deterministic RNG used everywhere seeds matter.
 *
 * splitmix64 core with a hand-rolled Box-Muller Gaussian so that streams are
 * reproducible bit-for-bit independent of the standard library's
 * distribution internals. One seed fully determines the stream.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in (0, 1].
  double next_unit() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1p-53;
  }

  /// Standard normal via Box-Muller; second value of each pair is cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double gaussian(double stddev) { return stddev * next_gaussian(); }

  /// Uniform integer in [0, n), n > 0. Multiply-shift, no modulo bias to speak
  /// of at toy scales.
  int next_below(int n) {
    return static_cast<int>(
        (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Folds several values into one seed. Used to derive per-cell noise seeds.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    Rng r(h);
    h = r.next_u64();
  }
  return h;
}

/// FNV-1a 64-bit. Stable content hash for seeds and output manifests.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cotlab
