#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "celeste/rng.hpp"

using namespace celeste;

TEST_CASE("uniform bounds and determinism") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(u == b.uniform());
  }
}

TEST_CASE("normal moments") {
  Rng rng(7);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sumsq += z * z;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("poisson moments across the algorithm switch") {
  for (double rate : {0.3, 4.0, 9.9, 10.1, 100.0, 5000.0}) {
    Rng rng(static_cast<std::uint64_t>(rate * 100) + 1);
    const int n = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double k = static_cast<double>(rng.poisson(rate));
      sum += k;
      sumsq += k * k;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double se_mean = std::sqrt(rate / n);
    // Var[sample variance] ~ (mu + 2 mu^2)/n for Poisson
    const double se_var = std::sqrt((rate + 2.0 * rate * rate) / n);
    CHECK(std::abs(mean - rate) < 5.0 * se_mean);
    CHECK(std::abs(var - rate) < 5.0 * se_var);
  }
}

TEST_CASE("poisson edge cases") {
  Rng rng(1);
  CHECK(rng.poisson(0.0) == 0);
  CHECK_THROWS_AS(rng.poisson(-1.0), std::domain_error);
}

TEST_CASE("arcsine beta has the right cdf at the quartiles") {
  Rng rng(11);
  const int n = 100000;
  int below_quarter = 0, below_half = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.arcsine_beta();
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    if (x < 0.25) ++below_quarter;
    if (x < 0.5) ++below_half;
  }
  // F(x) = 2/pi asin(sqrt(x)): F(0.25) = 1/3, F(0.5) = 1/2
  CHECK(std::abs(below_quarter / double(n) - 1.0 / 3.0) < 0.01);
  CHECK(std::abs(below_half / double(n) - 0.5) < 0.01);
}

TEST_CASE("mix_seed decorrelates indices") {
  std::vector<std::uint64_t> seen;
  for (int i = 0; i < 100; ++i) seen.push_back(mix_seed(5, i));
  for (std::size_t i = 0; i < seen.size(); ++i) {
    for (std::size_t j = i + 1; j < seen.size(); ++j) {
      CHECK(seen[i] != seen[j]);
    }
  }
}
