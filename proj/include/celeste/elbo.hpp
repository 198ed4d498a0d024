#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "celeste/sky_model.hpp"

namespace celeste {

// Per-source parameter vector layout. One Bernoulli type probability, a
// flux/color block per type (lognormal reference flux plus four diagonal
// Gaussian colors), the point-estimated position, and the point-estimated
// galaxy shape: 1 + 2*10 + 2 + 4 = 27 coordinates.
constexpr int kNumParams = 27;

using Vec27 = Eigen::Matrix<double, kNumParams, 1>;
using Mat27 = Eigen::Matrix<double, kNumParams, kNumParams>;
using UnconstrainedVector = Vec27;

namespace param {
inline constexpr int kPStar = 0;
inline constexpr int kStarBlock = 1;
inline constexpr int kGalBlock = 11;
inline constexpr int kTypeBlockSize = 10;
inline constexpr int kPosition = 21;
inline constexpr int kProfileMix = 23;
inline constexpr int kScale = 24;
inline constexpr int kAxisRatio = 25;
inline constexpr int kAngle = 26;
// offsets inside a type block
inline constexpr int kFluxLoc = 0;
inline constexpr int kFluxVar = 1;
inline constexpr int kColorLoc = 2;
inline constexpr int kColorVar = 6;
}  // namespace param

/// Variational factor parameters for one type hypothesis: q(log flux) is
/// N(log_flux_loc, log_flux_var), q(colors) is a diagonal Gaussian.
struct TypeParams {
  double log_flux_loc = 0.0;
  double log_flux_var = 0.25;
  Eigen::Vector4d color_loc = Eigen::Vector4d::Zero();
  Eigen::Vector4d color_var = Eigen::Vector4d::Constant(0.25);
};

/// The per-source slice of the optimization vector: variational
/// distribution parameters plus point-estimated geometry.
struct VariationalParams {
  double p_star = 0.5;  // q(type = star), in (0, 1)
  TypeParams star;
  TypeParams galaxy;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();  // world degrees
  GalaxyShape shape;
};

/// Constrained parameter vector in the canonical ordering above.
Vec27 pack_params(const VariationalParams& vp);
VariationalParams unpack_params(const Vec27& theta);

// -- unconstraining transform ------------------------------------------------
//
// logit for (0,1) quantities (p_star, profile_mix, axis_ratio), logit of
// angle/180 for the orientation, log for positive quantities (variances,
// galaxy scale), identity for locations and positions. Bijective; exact
// boundary values are rejected.

Vec27 to_unconstrained(const VariationalParams& vp);  // throws domain_error
VariationalParams to_constrained(const Vec27& x);

/// Componentwise transform with first and second derivatives, used to
/// push derivatives between the two coordinate systems.
struct TransformChain {
  Vec27 theta;    // constrained values
  Vec27 dtheta;   // d theta_i / d x_i
  Vec27 d2theta;  // d^2 theta_i / d x_i^2
};
TransformChain transform_chain(const Vec27& x);

// -- moments -----------------------------------------------------------------

struct FluxMoments {
  double mean = 0.0;    // E[flux in band]
  double second = 0.0;  // E[flux^2]
};

/// Moments of the band flux under q(flux, colors | type). The log flux in
/// any band is Gaussian with mean and variance given by signed partial
/// sums of the color parameters.
FluxMoments flux_moments(const VariationalParams& vp, bool star_type,
                         int band);

// -- source context ----------------------------------------------------------

struct PixelWindow {
  int x0 = 0, y0 = 0;
  int width = 0, height = 0;
};

/// One image cutout around the target source. `base_rate` carries the sky
/// background plus the (fixed) neighbor contributions per pixel;
/// `lgamma_sum` caches sum log Gamma(x+1), which affects the value only.
struct ImagePatch {
  ImageMetadata meta;
  PixelWindow window;
  std::vector<std::int32_t> counts;
  std::vector<double> base_rate;
  double lgamma_sum = 0.0;
};

struct PatchPolicy {
  double sigma_multiplier = 4.0;  // window half-size in combined sigmas
  double max_radius_px = 64.0;
};

/// Everything needed to evaluate one source's objective with its
/// neighbors held fixed.
struct SourceContext {
  VariationalParams init;
  std::vector<SourceParams> neighbors;
  std::vector<ImagePatch> patches;
  Prior prior;
  bool has_target = true;
};

SourceContext make_source_context(const VariationalParams& init,
                                  std::vector<SourceParams> neighbors,
                                  std::span<const Image* const> images,
                                  const Prior& prior,
                                  const PatchPolicy& policy = {});

/// Starting point for optimization from a rough catalog estimate; interior
/// clamping keeps the unconstraining transform applicable.
VariationalParams init_from_estimate(const SourceParams& estimate,
                                     const Prior& prior);

// -- objective ---------------------------------------------------------------

struct RateMoments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Mean and variance of the Poisson rate at an (absolute) pixel of one
/// patch under q. Neighbors contribute to the mean only.
RateMoments pixel_rate_moments(const SourceContext& ctx,
                               const VariationalParams& vp, int patch_index,
                               int px, int py);

/// Value with dense derivatives with respect to the constrained parameter
/// vector (canonical ordering).
struct Evaluation {
  double value = 0.0;
  Vec27 grad = Vec27::Zero();
  Mat27 hess = Mat27::Zero();
};

/// Delta-method expected Poisson log likelihood over all patch pixels:
/// sum x * (log E[F] - Var[F] / (2 E[F]^2)) - E[F] - log Gamma(x+1),
/// with exact derivatives of that expression.
Evaluation expected_log_likelihood(const SourceContext& ctx,
                                   const VariationalParams& vp);

/// KL(q || prior) for the variational factors, in closed form. Geometry
/// coordinates carry no prior and contribute zero.
Evaluation kl_divergence(const VariationalParams& vp, const Prior& prior);

struct ElboResult {
  bool ok = false;  // false: rejected evaluation (non-finite intermediate)
  double value = 0.0;
  Vec27 grad = Vec27::Zero();
  Mat27 hess = Mat27::Zero();
};

/// The variational lower bound (expected log likelihood minus KL) as a
/// function of the unconstrained vector, with the transform's chain-rule
/// curvature folded into the derivatives.
ElboResult elbo(const SourceContext& ctx, const Vec27& x);

}  // namespace celeste
