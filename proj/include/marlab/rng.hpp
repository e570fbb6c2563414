#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace marlab {

/// SplitMix64 (Steele, Lea & Flood 2014). Chosen as the project-wide
/// generator because its output is a pure function of the 64-bit seed,
/// identical on every platform and compiler. All randomness in training,
/// sampling and the harness flows through this type; per-episode seeds are
/// derived as seed_base + episode_index.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

/// Deterministically derives a child seed from a base seed and a tag.
/// Chained calls give independent streams for (round, agent, step, ...)
/// coordinates without any shared mutable state.
inline std::uint64_t seed_combine(std::uint64_t base, std::uint64_t tag) {
  SplitMix64 g(base);
  std::uint64_t x = g.next() + 0x9e3779b97f4a7c15ULL * (tag + 1);
  return SplitMix64(x).next();
}

/// Samples an index from a probability row by inverse-CDF walk. The row is
/// assumed normalized; the final index absorbs any rounding shortfall.
inline int sample_index(const Eigen::Ref<const Eigen::VectorXd>& probs,
                        double u) {
  double cum = 0.0;
  const int n = static_cast<int>(probs.size());
  for (int i = 0; i < n; ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return n - 1;
}

}  // namespace marlab
