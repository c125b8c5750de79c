#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace dualcrl {

/// Seedable, splittable pseudo-random generator.
///
/// Child streams are derived by hashing (seed, stream id) with SplitMix64, so
/// `Rng(7).split(3)` is the same stream on every run and independent of how
/// many numbers the parent has already drawn.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL)));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return normal_(engine_); }
  int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Index drawn from an unnormalized non-negative weight vector.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    // round-off: return the last index with positive weight
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return static_cast<int>(i);
    return 0;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dualcrl
