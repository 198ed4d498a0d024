#pragma once

#include <cstdint>
#include <random>

namespace celeste {

/// Seeded random source with self-contained distributions.
///
/// The mt19937_64 engine is fully specified by the C++ standard; the
/// distribution layer is implemented here (rather than via <random>
/// distribution classes, whose algorithms are implementation-defined) so
/// that every sampled stream is reproducible for a given seed regardless
/// of standard-library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on (0, 1].
  double uniform_pos();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). Requires n >= 1.
  std::uint64_t uniform_below(std::uint64_t n);

  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  double lognormal(double log_mean, double log_sd);

  /// Poisson with arbitrary non-negative rate. Exact (inversion for small
  /// rates, Hormann's PTRS transformed rejection for large ones).
  std::int64_t poisson(double rate);

  /// Beta(1/2, 1/2) (arcsine law).
  double arcsine_beta();

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 step; used to derive independent stream seeds from a base
/// seed plus an index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace celeste
