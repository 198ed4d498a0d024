#include "celeste/gauss2d.hpp"

#include <cmath>
#include <stdexcept>

namespace celeste {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

inline void check_cov(double c11, double c12, double c22, double det) {
  if (!(det > 0.0) || !(c11 > 0.0) || !(c22 > 0.0)) {
    throw std::domain_error("gauss2d: covariance not positive definite");
  }
  (void)c12;
}

}  // namespace

double gauss2d_density(double d1, double d2, double c11, double c12,
                       double c22) {
  const double det = c11 * c22 - c12 * c12;
  check_cov(c11, c12, c22, det);
  const double q = (c22 * d1 * d1 - 2.0 * c12 * d1 * d2 + c11 * d2 * d2) / det;
  return std::exp(-0.5 * q) / (2.0 * M_PI * std::sqrt(det));
}

Gauss2dDerivs gauss2d_with_derivs(double d1, double d2, double c11,
                                  double c12, double c22) {
  const double det = c11 * c22 - c12 * c12;
  check_cov(c11, c12, c22, det);

  // precision matrix P = C^-1 and e = P * d
  const double p11 = c22 / det, p22 = c11 / det, p12 = -c12 / det;
  const double e1 = p11 * d1 + p12 * d2;
  const double e2 = p12 * d1 + p22 * d2;
  const double q = d1 * e1 + d2 * e2;

  Gauss2dDerivs out;
  const double log_value = -kLogTwoPi - 0.5 * std::log(det) - 0.5 * q;
  out.value = std::exp(log_value);

  // gradient of L = log density
  Eigen::Matrix<double, 5, 1> gl;
  gl[0] = -e1;
  gl[1] = -e2;
  // dL/dc_a = -1/2 tr(P E_a) + 1/2 e' E_a e, with E_12 carrying both
  // symmetric off-diagonal slots
  gl[2] = 0.5 * (e1 * e1 - p11);
  gl[3] = e1 * e2 - p12;
  gl[4] = 0.5 * (e2 * e2 - p22);

  // f_a = de/dc_a = -P E_a e
  const double f11_1 = -(p11 * e1), f11_2 = -(p12 * e1);
  const double f12_1 = -(p11 * e2 + p12 * e1), f12_2 = -(p12 * e2 + p22 * e1);
  const double f22_1 = -(p12 * e2), f22_2 = -(p22 * e2);

  Eigen::Matrix<double, 5, 5> hl;
  // d2L/dd dd = -P
  hl(0, 0) = -p11;
  hl(0, 1) = hl(1, 0) = -p12;
  hl(1, 1) = -p22;
  // d2L/dd dc_a = -f_a
  hl(0, 2) = hl(2, 0) = -f11_1;
  hl(1, 2) = hl(2, 1) = -f11_2;
  hl(0, 3) = hl(3, 0) = -f12_1;
  hl(1, 3) = hl(3, 1) = -f12_2;
  hl(0, 4) = hl(4, 0) = -f22_1;
  hl(1, 4) = hl(4, 1) = -f22_2;

  // d2L/dc_a dc_b = 1/2 tr(P E_b P E_a) + e' E_a f_b
  // T_a = P E_a
  Eigen::Matrix2d P;
  P << p11, p12, p12, p22;
  const Eigen::Matrix2d E11 = (Eigen::Matrix2d() << 1, 0, 0, 0).finished();
  const Eigen::Matrix2d E12 = (Eigen::Matrix2d() << 0, 1, 1, 0).finished();
  const Eigen::Matrix2d E22 = (Eigen::Matrix2d() << 0, 0, 0, 1).finished();
  const Eigen::Matrix2d T[3] = {P * E11, P * E12, P * E22};
  const double f[3][2] = {{f11_1, f11_2}, {f12_1, f12_2}, {f22_1, f22_2}};
  const Eigen::Matrix2d* E[3] = {&E11, &E12, &E22};
  const Eigen::Vector2d e(e1, e2);
  for (int a = 0; a < 3; ++a) {
    for (int b = a; b < 3; ++b) {
      const double tr = (T[b] * T[a]).trace();
      const Eigen::Vector2d fb(f[b][0], f[b][1]);
      const double val = 0.5 * tr + e.dot((*E[a]) * fb);
      hl(2 + a, 2 + b) = val;
      hl(2 + b, 2 + a) = val;
    }
  }

  out.grad = out.value * gl;
  out.hess = out.value * (gl * gl.transpose() + hl);
  return out;
}

}  // namespace celeste
