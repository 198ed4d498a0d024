#include "celeste/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace celeste {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform_pos() {
  return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

std::uint64_t Rng::uniform_below(std::uint64_t n) {
  if (n == 0) throw std::domain_error("uniform_below: n must be positive");
  // rejection to avoid modulo bias
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  const double u1 = uniform_pos();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

double Rng::lognormal(double log_mean, double log_sd) {
  return std::exp(normal(log_mean, log_sd));
}

std::int64_t Rng::poisson(double rate) {
  if (!(rate >= 0.0)) throw std::domain_error("poisson: rate must be >= 0");
  if (rate == 0.0) return 0;
  if (rate < 10.0) {
    // multiplication method (Knuth)
    const double threshold = std::exp(-rate);
    std::int64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform_pos();
    } while (p > threshold);
    return k - 1;
  }
  // PTRS transformed rejection (Hormann 1993), exact for rate >= 10
  const double mu = rate;
  const double b = 0.931 + 2.53 * std::sqrt(mu);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double log_mu = std::log(mu);
  for (;;) {
    double u = uniform() - 0.5;
    double v = uniform_pos();
    double us = 0.5 - std::abs(u);
    double kf = std::floor((2.0 * a / us + b) * u + mu + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(kf);
    if (kf < 0.0 || (us < 0.013 && v > us)) continue;
    double k = kf;
    if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
        k * log_mu - mu - std::lgamma(k + 1.0)) {
      return static_cast<std::int64_t>(kf);
    }
  }
}

double Rng::arcsine_beta() {
  const double s = std::sin(kTwoPi / 4.0 * uniform());
  return s * s;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace celeste
