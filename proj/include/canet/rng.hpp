// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>

namespace canet {

/// Counter-based SplitMix64 generator.
///
/// The whole state is one 64-bit word that advances by the golden-ratio
/// increment 0x9E3779B97F4A7C15 on every draw; the output is the
/// SplitMix64 finalizer applied to the new state. Derived distributions
/// below only use integer arithmetic and `std::log`/`std::cos`/`std::sqrt`,
/// so a seed fixes the draw sequence.
class Rng {
 public:
  static constexpr std::uint64_t kIncrement = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t state() const noexcept { return state_; }
  void set_state(std::uint64_t state) noexcept { state_ = state; }

  std::uint64_t next_u64() noexcept {
    state_ += kIncrement;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). Uses rejection to stay unbiased.
  std::uint64_t uniform_index(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is discarded so the
  /// generator state stays a single word.
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, sigma) resampled until it falls within +-2 sigma.
  double truncated_normal(double sigma) noexcept {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * sigma;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  Rng mixer(seed ^ (stream * 0xD1B54A32D192ED03ULL));
  return mixer.next_u64();
}

}  // namespace canet
