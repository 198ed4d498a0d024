#pragma once

#include <Eigen/Dense>

namespace celeste {

/// Bivariate normal density at offset (d1, d2) from the mean, with
/// covariance [[c11, c12], [c12, c22]].
double gauss2d_density(double d1, double d2, double c11, double c12,
                       double c22);

/// Density plus first and second derivatives with respect to the five
/// inputs, ordered (d1, d2, c11, c12, c22). The off-diagonal covariance
/// entry is treated as a single parameter occupying both symmetric slots.
struct Gauss2dDerivs {
  double value = 0.0;
  Eigen::Matrix<double, 5, 1> grad = Eigen::Matrix<double, 5, 1>::Zero();
  Eigen::Matrix<double, 5, 5> hess = Eigen::Matrix<double, 5, 5>::Zero();
};

Gauss2dDerivs gauss2d_with_derivs(double d1, double d2, double c11,
                                  double c12, double c22);

}  // namespace celeste
