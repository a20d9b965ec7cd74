#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace dnet {

/// One step of splitmix64; also used to derive sub-seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Mixes two 64-bit values into a new seed (order-sensitive).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// xoshiro256** seeded through splitmix64.
///
/// All randomness in the library flows through this generator so that
/// partitions, shuffles, synthetic data and initial weights are identical on
/// every platform. The integer and floating-point helpers below are defined
/// here rather than through <random> distributions, whose output is
/// implementation-specific.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next(); }
  result_type next();

  /// Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace dnet
