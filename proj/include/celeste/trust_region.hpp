#pragma once

#include <functional>

#include <Eigen/Dense>

namespace celeste {

struct TrConfig {
  double initial_radius = 1.0;
  double max_radius = 10.0;
  double eta_accept = 0.1;
  double shrink_threshold = 0.25;
  double grow_threshold = 0.75;
  double shrink_factor = 0.25;
  double grow_factor = 2.0;
  double grad_tol = 1e-8;  // sup-norm, scaled by 1 + |value|
  int max_iters = 50;
};

enum class TrStatus { kConverged, kMaxIters, kEvalFailure };

struct TrResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double grad_norm = 0.0;  // sup-norm at the final point
  int iterations = 0;
  TrStatus status = TrStatus::kMaxIters;
};

/// Exact solution of min g's + 1/2 s'Hs subject to ||s|| <= radius via
/// eigendecomposition and 1-D root finding on the Lagrange multiplier
/// (More-Sorensen), including the hard case.
struct SubproblemResult {
  Eigen::VectorXd step;
  double lambda = 0.0;       // multiplier; (H + lambda I) s = -g
  bool on_boundary = false;
  double predicted_reduction = 0.0;  // m(0) - m(s) >= 0
};

SubproblemResult solve_subproblem(const Eigen::VectorXd& g,
                                  const Eigen::MatrixXd& H, double radius);

/// Objective callback: fills value/gradient/Hessian at x, returning false
/// to flag a rejected evaluation.
using Objective = std::function<bool(const Eigen::VectorXd& x, double& value,
                                     Eigen::VectorXd& grad,
                                     Eigen::MatrixXd& hess)>;

/// Trust-region Newton maximization. The value sequence over accepted
/// steps is non-decreasing; convergence is declared when the gradient
/// sup-norm drops below grad_tol * (1 + |value|).
TrResult maximize(const Objective& objective, const Eigen::VectorXd& x0,
                  const TrConfig& cfg = {});

}  // namespace celeste
