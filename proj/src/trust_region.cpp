#include "celeste/trust_region.hpp"

#include <cmath>
#include <stdexcept>

namespace celeste {

namespace {

// secular-equation norm ||s(lambda)|| in the eigenbasis
double step_norm(const Eigen::VectorXd& ghat, const Eigen::VectorXd& evals,
                 double lambda) {
  double n2 = 0.0;
  for (int i = 0; i < ghat.size(); ++i) {
    const double d = evals[i] + lambda;
    n2 += (ghat[i] * ghat[i]) / (d * d);
  }
  return std::sqrt(n2);
}

double step_norm_derivative(const Eigen::VectorXd& ghat,
                            const Eigen::VectorXd& evals, double lambda,
                            double norm) {
  double acc = 0.0;
  for (int i = 0; i < ghat.size(); ++i) {
    const double d = evals[i] + lambda;
    acc -= (ghat[i] * ghat[i]) / (d * d * d);
  }
  return acc / norm;
}

}  // namespace

SubproblemResult solve_subproblem(const Eigen::VectorXd& g,
                                  const Eigen::MatrixXd& H, double radius) {
  const int n = static_cast<int>(g.size());
  if (H.rows() != n || H.cols() != n) {
    throw std::domain_error("solve_subproblem: dimension mismatch");
  }
  if (!(radius > 0.0)) {
    throw std::domain_error("solve_subproblem: radius must be positive");
  }
  if (!g.allFinite() || !H.allFinite()) {
    throw std::domain_error("solve_subproblem: non-finite input");
  }
  const double scale = std::max(1.0, H.cwiseAbs().maxCoeff());
  if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::domain_error("solve_subproblem: H is not symmetric");
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (H + H.transpose()));
  const Eigen::VectorXd evals = eig.eigenvalues();
  const Eigen::MatrixXd& Q = eig.eigenvectors();
  const Eigen::VectorXd ghat = Q.transpose() * g;
  const double lambda_min = evals.minCoeff();

  SubproblemResult out;
  auto finish = [&](const Eigen::VectorXd& shat, double lambda,
                    bool boundary) {
    out.step = Q * shat;
    out.lambda = lambda;
    out.on_boundary = boundary;
    out.predicted_reduction =
        -(g.dot(out.step) + 0.5 * out.step.dot(H * out.step));
    return out;
  };

  // interior Newton step when H is positive definite
  if (lambda_min > 0.0) {
    Eigen::VectorXd shat(n);
    for (int i = 0; i < n; ++i) shat[i] = -ghat[i] / evals[i];
    if (shat.norm() <= radius) {
      return finish(shat, 0.0, shat.norm() >= radius * (1.0 - 1e-12));
    }
  }

  // boundary solution: find lambda > max(0, -lambda_min) with
  // ||s(lambda)|| = radius
  const double lambda_floor = std::max(0.0, -lambda_min);
  const double eig_tol =
      1e-12 * std::max(1.0, std::abs(lambda_min)) + 1e-300;

  // gradient mass on the minimal eigenspace decides the hard case
  double gmin2 = 0.0;
  for (int i = 0; i < n; ++i) {
    if (evals[i] <= lambda_min + eig_tol) gmin2 += ghat[i] * ghat[i];
  }
  const double gnorm = ghat.norm();
  if (lambda_min <= 0.0 && gmin2 <= (1e-14 * gnorm) * (1e-14 * gnorm) + 1e-300) {
    // pseudo-inverse step on the complement of the minimal eigenspace
    Eigen::VectorXd shat = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      const double d = evals[i] + lambda_floor;
      if (evals[i] > lambda_min + eig_tol && d > 0.0) shat[i] = -ghat[i] / d;
    }
    const double base = shat.norm();
    if (base <= radius) {
      // move along a minimal eigenvector to reach the boundary
      int imin = 0;
      evals.minCoeff(&imin);
      const double tau = std::sqrt(std::max(0.0, radius * radius - base * base));
      shat[imin] += tau;
      return finish(shat, lambda_floor, true);
    }
  }

  // bracket the multiplier; the norm decreases monotonically in lambda
  double lo = lambda_floor;
  double hi = lambda_floor + std::max(1.0, gnorm / radius);
  while (step_norm(ghat, evals, hi) > radius) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(hi)) {
      throw std::runtime_error("solve_subproblem: bracketing failed");
    }
  }

  // safeguarded Newton on 1/radius - 1/||s(lambda)||
  double lambda = 0.5 * (lo + hi);
  if (!(lambda > lambda_floor)) lambda = lambda_floor + 1e-12;
  for (int iter = 0; iter < 200; ++iter) {
    const double norm = step_norm(ghat, evals, lambda);
    if (std::abs(norm - radius) <= 1e-12 * radius) break;
    if (norm > radius) {
      lo = lambda;
    } else {
      hi = lambda;
    }
    const double dnorm = step_norm_derivative(ghat, evals, lambda, norm);
    double next = lambda - (1.0 / radius - 1.0 / norm) * (norm * norm / dnorm);
    if (!(next > lo) || !(next < hi) || !std::isfinite(next)) {
      next = 0.5 * (lo + hi);
    }
    lambda = next;
  }

  Eigen::VectorXd shat(n);
  for (int i = 0; i < n; ++i) shat[i] = -ghat[i] / (evals[i] + lambda);
  // land exactly on the sphere
  const double norm = shat.norm();
  if (norm > 0.0) shat *= radius / norm;
  return finish(shat, lambda, true);
}

TrResult maximize(const Objective& objective, const Eigen::VectorXd& x0,
                  const TrConfig& cfg) {
  const int n = static_cast<int>(x0.size());
  TrResult res;
  res.x = x0;

  double value = 0.0;
  Eigen::VectorXd grad(n);
  Eigen::MatrixXd hess(n, n);
  if (!objective(x0, value, grad, hess)) {
    res.status = TrStatus::kEvalFailure;
    return res;
  }

  auto converged = [&](double v, const Eigen::VectorXd& g) {
    return g.cwiseAbs().maxCoeff() <= cfg.grad_tol * (1.0 + std::abs(v));
  };

  double radius = cfg.initial_radius;
  int consecutive_failures = 0;
  int iters = 0;

  while (true) {
    res.value = value;
    res.grad_norm = grad.cwiseAbs().maxCoeff();
    res.iterations = iters;
    if (converged(value, grad)) {
      res.status = TrStatus::kConverged;
      return res;
    }
    if (iters >= cfg.max_iters) {
      res.status = TrStatus::kMaxIters;
      return res;
    }

    // minimize the negated objective
    SubproblemResult sub;
    try {
      sub = solve_subproblem(-grad, -hess, radius);
    } catch (const std::exception&) {
      res.status = TrStatus::kEvalFailure;
      return res;
    }
    ++iters;

    const Eigen::VectorXd x_trial = res.x + sub.step;
    double value_trial = 0.0;
    Eigen::VectorXd grad_trial(n);
    Eigen::MatrixXd hess_trial(n, n);
    const bool ok = objective(x_trial, value_trial, grad_trial, hess_trial);

    double rho = -1.0;
    if (ok) {
      const double actual = value_trial - value;  // reduction of -objective
      if (sub.predicted_reduction > 0.0) {
        rho = actual / sub.predicted_reduction;
      } else {
        rho = actual > 0.0 ? 1.0 : -1.0;
      }
      consecutive_failures = 0;
    } else {
      ++consecutive_failures;
      if (consecutive_failures > 60) {
        res.status = TrStatus::kEvalFailure;
        return res;
      }
    }

    if (ok && rho > cfg.eta_accept) {
      res.x = x_trial;
      value = value_trial;
      grad = grad_trial;
      hess = hess_trial;
    }

    if (!ok || rho < cfg.shrink_threshold) {
      radius *= cfg.shrink_factor;
      if (radius < 1e-18) {
        res.status = ok || converged(value, grad) ? TrStatus::kMaxIters
                                                  : TrStatus::kEvalFailure;
        res.value = value;
        res.grad_norm = grad.cwiseAbs().maxCoeff();
        res.iterations = iters;
        return res;
      }
    } else if (rho > cfg.grow_threshold && sub.on_boundary) {
      radius = std::min(radius * cfg.grow_factor, cfg.max_radius);
    }
  }
}

}  // namespace celeste
