#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "celeste/rng.hpp"
#include "celeste/trust_region.hpp"

using namespace celeste;

namespace {

double model(const Eigen::VectorXd& g, const Eigen::MatrixXd& H,
             const Eigen::VectorXd& s) {
  return g.dot(s) + 0.5 * s.dot(H * s);
}

// dense polar grid search over the disc, 2-D only
double grid_search_min(const Eigen::VectorXd& g, const Eigen::MatrixXd& H,
                       double radius) {
  double best = 0.0;
  for (int ir = 0; ir <= 400; ++ir) {
    const double r = radius * ir / 400.0;
    for (int it = 0; it < 1440; ++it) {
      const double th = 2.0 * M_PI * it / 1440.0;
      Eigen::VectorXd s(2);
      s << r * std::cos(th), r * std::sin(th);
      best = std::min(best, model(g, H, s));
    }
  }
  return best;
}

void check_kkt(const Eigen::VectorXd& g, const Eigen::MatrixXd& H,
               double radius, const SubproblemResult& sub) {
  const double scale = std::max(1.0, g.norm() + H.cwiseAbs().maxCoeff());
  CHECK(sub.step.norm() <= radius * (1.0 + 1e-10));
  // stationarity: (H + lambda I) s = -g
  const Eigen::VectorXd resid = H * sub.step + sub.lambda * sub.step + g;
  CHECK(resid.cwiseAbs().maxCoeff() <= 1e-6 * scale);
  CHECK(sub.lambda >= -1e-12);
  if (!sub.on_boundary) {
    CHECK(sub.lambda <= 1e-10 * scale);
  }
  // H + lambda I must be positive semidefinite
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
      H + sub.lambda * Eigen::MatrixXd::Identity(g.size(), g.size()));
  CHECK(eig.eigenvalues().minCoeff() >= -1e-6 * scale);
}

}  // namespace

TEST_CASE("interior Newton step when it fits") {
  Eigen::VectorXd g(3);
  g << 0.3, -0.2, 0.1;
  const Eigen::MatrixXd H = Eigen::MatrixXd::Identity(3, 3);
  const auto sub = solve_subproblem(g, H, 1.0);
  CHECK((sub.step + g).norm() < 1e-12);
  CHECK(sub.lambda == doctest::Approx(0.0));
  CHECK_FALSE(sub.on_boundary);
}

TEST_CASE("boundary scaling of a long gradient step") {
  Eigen::VectorXd g(3);
  g << 3.0, 4.0, 0.0;  // norm 5
  const Eigen::MatrixXd H = Eigen::MatrixXd::Identity(3, 3);
  const double radius = 1.0;
  const auto sub = solve_subproblem(g, H, radius);
  const Eigen::VectorXd want = -radius * g / g.norm();
  CHECK((sub.step - want).norm() < 1e-9);
  CHECK(sub.on_boundary);
  check_kkt(g, H, radius, sub);
}

TEST_CASE("indefinite 2-D subproblem matches the grid-search oracle") {
  Eigen::MatrixXd H(2, 2);
  H << -1.0, 0.0, 0.0, 2.0;
  Eigen::VectorXd g(2);
  g << 0.0, 1.0;  // orthogonal to the negative-curvature direction
  const double radius = 1.5;
  const auto sub = solve_subproblem(g, H, radius);
  const double got = model(g, H, sub.step);
  const double want = grid_search_min(g, H, radius);
  CHECK(got <= want + 1e-4 * std::max(1.0, std::abs(want)));
  CHECK(sub.predicted_reduction == doctest::Approx(-got).epsilon(1e-10));
  check_kkt(g, H, radius, sub);
}

TEST_CASE("random subproblems satisfy the KKT conditions") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_below(8));
    Eigen::MatrixXd A(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
    }
    Eigen::MatrixXd H = 0.5 * (A + A.transpose());
    if (trial % 3 == 0) {
      H += (rng.uniform(0.5, 3.0)) * Eigen::MatrixXd::Identity(n, n);
    }
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) g[i] = rng.normal();
    if (trial % 7 == 0) g.setZero();
    const double radius = rng.uniform(0.1, 3.0);
    const auto sub = solve_subproblem(g, H, radius);
    check_kkt(g, H, radius, sub);
    CHECK(sub.predicted_reduction >= -1e-10);
  }
}

TEST_CASE("hard case: gradient orthogonal to the negative eigenspace") {
  Eigen::MatrixXd H(2, 2);
  H << -1.0, 0.0, 0.0, 2.0;
  Eigen::VectorXd g(2);
  g << 0.0, 0.3;
  // the pseudo-step is short, so the solution pads along the eigenvector
  const double radius = 2.0;
  const auto sub = solve_subproblem(g, H, radius);
  CHECK(sub.on_boundary);
  CHECK(sub.step.norm() == doctest::Approx(radius).epsilon(1e-9));
  CHECK(sub.lambda == doctest::Approx(1.0).epsilon(1e-8));
  const double want = grid_search_min(g, H, radius);
  CHECK(model(g, H, sub.step) <= want + 1e-4);
}

TEST_CASE("rejects asymmetric or non-finite hessians") {
  Eigen::MatrixXd H(2, 2);
  H << 1.0, 0.5, -0.5, 1.0;
  Eigen::VectorXd g = Eigen::VectorXd::Ones(2);
  CHECK_THROWS_AS(solve_subproblem(g, H, 1.0), std::domain_error);
  H << 1.0, NAN, NAN, 1.0;
  CHECK_THROWS_AS(solve_subproblem(g, H, 1.0), std::domain_error);
  H.setIdentity();
  CHECK_THROWS_AS(solve_subproblem(g, H, 0.0), std::domain_error);
}

namespace {

Objective concave_quadratic(const Eigen::VectorXd& opt) {
  return [opt](const Eigen::VectorXd& x, double& v, Eigen::VectorXd& g,
               Eigen::MatrixXd& h) {
    const Eigen::VectorXd d = x - opt;
    v = -0.5 * d.squaredNorm();
    g = -d;
    h = -Eigen::MatrixXd::Identity(x.size(), x.size());
    return true;
  };
}

// classic Rosenbrock, negated for maximization
Objective neg_rosenbrock() {
  return [](const Eigen::VectorXd& x, double& v, Eigen::VectorXd& g,
            Eigen::MatrixXd& h) {
    const double a = x[0], b = x[1];
    v = -(100.0 * std::pow(b - a * a, 2) + std::pow(1.0 - a, 2));
    g.resize(2);
    g[0] = -(-400.0 * a * (b - a * a) - 2.0 * (1.0 - a));
    g[1] = -(200.0 * (b - a * a));
    h.resize(2, 2);
    h(0, 0) = -(1200.0 * a * a - 400.0 * b + 2.0);
    h(0, 1) = h(1, 0) = 400.0 * a;
    h(1, 1) = -200.0;
    return true;
  };
}

}  // namespace

TEST_CASE("concave quadratic converges in one accepted iteration") {
  Eigen::VectorXd opt(4);
  opt << 0.2, -0.1, 0.4, 0.0;
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(4);
  const TrResult res = maximize(concave_quadratic(opt), x0, {});
  CHECK(res.status == TrStatus::kConverged);
  CHECK(res.iterations == 1);
  CHECK((res.x - opt).norm() < 1e-10);
}

TEST_CASE("rosenbrock reaches the optimum within 50 iterations") {
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1.0;
  const TrResult res = maximize(neg_rosenbrock(), x0, {});
  CHECK(res.status == TrStatus::kConverged);
  CHECK(res.iterations <= 50);
  CHECK(res.grad_norm <= 1e-8 * (1.0 + std::abs(res.value)));
  CHECK(std::abs(res.x[0] - 1.0) < 1e-6);
  CHECK(std::abs(res.x[1] - 1.0) < 1e-6);
}

TEST_CASE("evaluation failure at the start aborts immediately") {
  Objective bad = [](const Eigen::VectorXd&, double&, Eigen::VectorXd&,
                     Eigen::MatrixXd&) { return false; };
  const TrResult res = maximize(bad, Eigen::VectorXd::Zero(2), {});
  CHECK(res.status == TrStatus::kEvalFailure);
  CHECK(res.iterations == 0);
}

TEST_CASE("accepted values never decrease along the run") {
  // record the value at every successful evaluation; accepted iterates are
  // exactly the points where the recorded best improves
  std::vector<double> values;
  Objective quartic = [&values](const Eigen::VectorXd& x, double& v,
                                Eigen::VectorXd& g, Eigen::MatrixXd& h) {
    v = -(std::pow(x[0] * x[0] - 1.0, 2) + 0.5 * x[1] * x[1] +
          0.1 * std::pow(x[0] + x[1], 4));
    const double d0 =
        4.0 * x[0] * (x[0] * x[0] - 1.0) + 0.4 * std::pow(x[0] + x[1], 3);
    const double d1 = x[1] + 0.4 * std::pow(x[0] + x[1], 3);
    g.resize(2);
    g << -d0, -d1;
    h.resize(2, 2);
    const double c = 1.2 * std::pow(x[0] + x[1], 2);
    h(0, 0) = -(12.0 * x[0] * x[0] - 4.0 + c);
    h(0, 1) = h(1, 0) = -c;
    h(1, 1) = -(1.0 + c);
    values.push_back(v);
    return true;
  };
  Eigen::VectorXd x0(2);
  x0 << 2.5, -2.0;
  TrConfig cfg;
  cfg.max_iters = 200;
  const TrResult res = maximize(quartic, x0, cfg);
  CHECK(res.status == TrStatus::kConverged);
  CHECK(res.value >= values.front());
  // the final value is the max over all evaluations that were accepted,
  // hence the max over everything evaluated
  CHECK(res.value == *std::max_element(values.begin(), values.end()));
}

TEST_CASE("identical inputs produce identical results") {
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1.0;
  const TrResult a = maximize(neg_rosenbrock(), x0, {});
  const TrResult b = maximize(neg_rosenbrock(), x0, {});
  CHECK(a.iterations == b.iterations);
  CHECK(a.value == b.value);
  CHECK((a.x - b.x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("radius growth is capped at max_radius") {
  // weakly concave ramp: every step hits the boundary and requests growth
  Objective ramp = [](const Eigen::VectorXd& x, double& v, Eigen::VectorXd& g,
                      Eigen::MatrixXd& h) {
    v = x[0] - 1e-4 * x.squaredNorm();
    g.resize(2);
    g << 1.0 - 2e-4 * x[0], -2e-4 * x[1];
    h = -2e-4 * Eigen::MatrixXd::Identity(2, 2);
    return true;
  };
  TrConfig cfg;
  cfg.max_iters = 25;
  const TrResult res = maximize(ramp, Eigen::VectorXd::Zero(2), cfg);
  // optimum sits at x0 = 5000, unreachable in 25 steps of length <= 10
  CHECK(res.status == TrStatus::kMaxIters);
  CHECK(res.x[0] <= 25.0 * 10.0 + 1e-9);
  CHECK(res.x[0] > 0.0);
}
