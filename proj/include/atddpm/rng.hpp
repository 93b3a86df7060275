#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace atddpm {

namespace detail {

// Stafford variant 13 finalizer (the SplitMix64 output mix).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

// Odd increment with enough bit transitions, as in SplittableRandom.
constexpr std::uint64_t mix_gamma(std::uint64_t z) noexcept {
  z = mix64(z + kGoldenGamma) | 1ULL;
  const auto transitions = __builtin_popcountll(z ^ (z >> 1));
  return transitions < 24 ? z ^ 0xaaaaaaaaaaaaaaaaULL : z;
}

}  // namespace detail

/// Seedable, splittable 64-bit generator.
///
/// A generator is identified by (seed, stream). The stream selects both the
/// starting state and the Weyl increment, so distinct streams from one seed
/// walk disjoint, decorrelated sequences. `split(id)` derives a child from the
/// identity alone, never from the current position, which makes per-item and
/// per-step streams independent of evaluation order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
      : seed_(seed),
        stream_(stream),
        state_(detail::mix64(seed ^ detail::mix64(stream + detail::kGoldenGamma))),
        gamma_(detail::mix_gamma(stream ^ detail::mix64(seed))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64() noexcept {
    state_ += gamma_;
    return detail::mix64(state_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the bias is < n / 2^64 and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via the Box-Muller transform. Values come in pairs; the
  /// second of each pair is cached for the next call.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Child generator for sub-stream `id` of this generator's identity.
  Rng split(std::uint64_t id) const noexcept {
    return Rng(seed_, detail::mix64(stream_ * detail::kGoldenGamma + detail::mix64(id + 1)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t state_;
  std::uint64_t gamma_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace atddpm
