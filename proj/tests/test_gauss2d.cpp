#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "celeste/gauss2d.hpp"
#include "celeste/rng.hpp"

using namespace celeste;

namespace {

// central finite differences over the 5 inputs (d1, d2, c11, c12, c22)
Eigen::Matrix<double, 5, 1> fd_grad(const Eigen::Matrix<double, 5, 1>& p,
                                    double h) {
  Eigen::Matrix<double, 5, 1> g;
  for (int i = 0; i < 5; ++i) {
    auto hi = p, lo = p;
    hi[i] += h;
    lo[i] -= h;
    g[i] = (gauss2d_density(hi[0], hi[1], hi[2], hi[3], hi[4]) -
            gauss2d_density(lo[0], lo[1], lo[2], lo[3], lo[4])) /
           (2.0 * h);
  }
  return g;
}

Eigen::Matrix<double, 5, 1> sample_point(Rng& rng) {
  Eigen::Matrix<double, 5, 1> p;
  p[0] = rng.normal(0, 2);
  p[1] = rng.normal(0, 2);
  // random SPD covariance with moderate conditioning
  const double a = rng.uniform(0.5, 4.0);
  const double b = rng.uniform(0.5, 4.0);
  const double rho = rng.uniform(-0.7, 0.7);
  p[2] = a;
  p[3] = rho * std::sqrt(a * b);
  p[4] = b;
  return p;
}

}  // namespace

TEST_CASE("density normalizes against the 1-sigma circle mass") {
  // isotropic unit Gaussian at the origin
  CHECK(gauss2d_density(0, 0, 1, 0, 1) == doctest::Approx(1.0 / (2 * M_PI)));
  // correlation raises density at the origin by 1/sqrt(1-rho^2)
  const double rho = 0.6;
  CHECK(gauss2d_density(0, 0, 1, rho, 1) ==
        doctest::Approx(1.0 / (2 * M_PI * std::sqrt(1 - rho * rho))));
}

TEST_CASE("rejects non-positive-definite covariance") {
  CHECK_THROWS_AS(gauss2d_density(0, 0, 1.0, 1.5, 1.0), std::domain_error);
  CHECK_THROWS_AS(gauss2d_density(0, 0, -1.0, 0.0, 1.0), std::domain_error);
}

TEST_CASE("gradient matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = sample_point(rng);
    const auto g = gauss2d_with_derivs(p[0], p[1], p[2], p[3], p[4]);
    const auto fd = fd_grad(p, 1e-6);
    for (int i = 0; i < 5; ++i) {
      CHECK(g.grad[i] ==
            doctest::Approx(fd[i]).epsilon(1e-5).scale(
                std::max(1e-8, std::abs(g.value))));
    }
  }
}

TEST_CASE("hessian matches finite differences of the gradient") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto p = sample_point(rng);
    const auto g = gauss2d_with_derivs(p[0], p[1], p[2], p[3], p[4]);
    const double h = 1e-5;
    for (int j = 0; j < 5; ++j) {
      auto hi = p, lo = p;
      hi[j] += h;
      lo[j] -= h;
      const auto ghi = gauss2d_with_derivs(hi[0], hi[1], hi[2], hi[3], hi[4]);
      const auto glo = gauss2d_with_derivs(lo[0], lo[1], lo[2], lo[3], lo[4]);
      for (int i = 0; i < 5; ++i) {
        const double fd = (ghi.grad[i] - glo.grad[i]) / (2.0 * h);
        CHECK(g.hess(i, j) ==
              doctest::Approx(fd).epsilon(2e-4).scale(
                  std::max(1e-6, std::abs(g.value))));
      }
    }
    CHECK((g.hess - g.hess.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}
