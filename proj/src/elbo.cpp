#include "celeste/elbo.hpp"

#include <cmath>
#include <stdexcept>

#include "celeste/gauss2d.hpp"

namespace celeste {

namespace {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec10 = Eigen::Matrix<double, 10, 1>;

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// signed color coefficients of log(band flux) around the reference band
const std::array<std::array<double, kNumColors>, kNumBands>& color_coeffs() {
  static const std::array<std::array<double, kNumColors>, kNumBands> k = {{
      {{-1.0, -1.0, 0.0, 0.0}},
      {{0.0, -1.0, 0.0, 0.0}},
      {{0.0, 0.0, 0.0, 0.0}},
      {{0.0, 0.0, 1.0, 0.0}},
      {{0.0, 0.0, 1.0, 1.0}},
  }};
  return k;
}

enum class Kind { kIdentity, kLog, kLogit };

struct CoordSpec {
  Kind kind;
  double scale;  // logit range upper bound, or linear unit for identities
};

const std::array<CoordSpec, kNumParams>& coord_specs() {
  static const std::array<CoordSpec, kNumParams> specs = [] {
    std::array<CoordSpec, kNumParams> s{};
    auto set = [&](int i, Kind k, double scale = 1.0) {
      s[i] = {k, scale};
    };
    set(param::kPStar, Kind::kLogit);
    for (int base : {param::kStarBlock, param::kGalBlock}) {
      set(base + param::kFluxLoc, Kind::kIdentity);
      set(base + param::kFluxVar, Kind::kLog);
      for (int j = 0; j < kNumColors; ++j) {
        set(base + param::kColorLoc + j, Kind::kIdentity);
        set(base + param::kColorVar + j, Kind::kLog);
      }
    }
    // positions are optimized in arcseconds: degree-scale coordinates would
    // leave the trust-region ball and finite-difference steps six orders of
    // magnitude off the problem's natural length scale
    set(param::kPosition, Kind::kIdentity, 1.0 / kArcsecPerDeg);
    set(param::kPosition + 1, Kind::kIdentity, 1.0 / kArcsecPerDeg);
    set(param::kProfileMix, Kind::kLogit);
    set(param::kScale, Kind::kLog);
    set(param::kAxisRatio, Kind::kLogit);
    set(param::kAngle, Kind::kLogit, 180.0);
    return s;
  }();
  return specs;
}

}  // namespace

Vec27 pack_params(const VariationalParams& vp) {
  Vec27 theta;
  theta[param::kPStar] = vp.p_star;
  const TypeParams* blocks[2] = {&vp.star, &vp.galaxy};
  const int bases[2] = {param::kStarBlock, param::kGalBlock};
  for (int t = 0; t < 2; ++t) {
    theta[bases[t] + param::kFluxLoc] = blocks[t]->log_flux_loc;
    theta[bases[t] + param::kFluxVar] = blocks[t]->log_flux_var;
    for (int j = 0; j < kNumColors; ++j) {
      theta[bases[t] + param::kColorLoc + j] = blocks[t]->color_loc[j];
      theta[bases[t] + param::kColorVar + j] = blocks[t]->color_var[j];
    }
  }
  theta.segment<2>(param::kPosition) = vp.position;
  theta[param::kProfileMix] = vp.shape.profile_mix;
  theta[param::kScale] = vp.shape.scale_arcsec;
  theta[param::kAxisRatio] = vp.shape.axis_ratio;
  theta[param::kAngle] = vp.shape.angle_deg;
  return theta;
}

VariationalParams unpack_params(const Vec27& theta) {
  VariationalParams vp;
  vp.p_star = theta[param::kPStar];
  TypeParams* blocks[2] = {&vp.star, &vp.galaxy};
  const int bases[2] = {param::kStarBlock, param::kGalBlock};
  for (int t = 0; t < 2; ++t) {
    blocks[t]->log_flux_loc = theta[bases[t] + param::kFluxLoc];
    blocks[t]->log_flux_var = theta[bases[t] + param::kFluxVar];
    for (int j = 0; j < kNumColors; ++j) {
      blocks[t]->color_loc[j] = theta[bases[t] + param::kColorLoc + j];
      blocks[t]->color_var[j] = theta[bases[t] + param::kColorVar + j];
    }
  }
  vp.position = theta.segment<2>(param::kPosition);
  vp.shape.profile_mix = theta[param::kProfileMix];
  vp.shape.scale_arcsec = theta[param::kScale];
  vp.shape.axis_ratio = theta[param::kAxisRatio];
  vp.shape.angle_deg = theta[param::kAngle];
  return vp;
}

Vec27 to_unconstrained(const VariationalParams& vp) {
  const Vec27 theta = pack_params(vp);
  const auto& specs = coord_specs();
  Vec27 x;
  for (int i = 0; i < kNumParams; ++i) {
    const double v = theta[i];
    if (!std::isfinite(v)) {
      throw std::domain_error("to_unconstrained: non-finite parameter");
    }
    switch (specs[i].kind) {
      case Kind::kIdentity:
        x[i] = v / specs[i].scale;
        break;
      case Kind::kLog:
        if (!(v > 0.0)) {
          throw std::domain_error("to_unconstrained: non-positive parameter");
        }
        x[i] = std::log(v);
        break;
      case Kind::kLogit: {
        const double u = v / specs[i].scale;
        if (!(u > 0.0) || !(u < 1.0)) {
          throw std::domain_error("to_unconstrained: boundary value");
        }
        x[i] = logit(u);
        break;
      }
    }
  }
  return x;
}

TransformChain transform_chain(const Vec27& x) {
  const auto& specs = coord_specs();
  TransformChain c;
  for (int i = 0; i < kNumParams; ++i) {
    switch (specs[i].kind) {
      case Kind::kIdentity:
        c.theta[i] = x[i] * specs[i].scale;
        c.dtheta[i] = specs[i].scale;
        c.d2theta[i] = 0.0;
        break;
      case Kind::kLog: {
        const double e = std::exp(x[i]);
        c.theta[i] = e;
        c.dtheta[i] = e;
        c.d2theta[i] = e;
        break;
      }
      case Kind::kLogit: {
        const double s = sigmoid(x[i]);
        const double scale = specs[i].scale;
        c.theta[i] = scale * s;
        c.dtheta[i] = scale * s * (1.0 - s);
        c.d2theta[i] = scale * s * (1.0 - s) * (1.0 - 2.0 * s);
        break;
      }
    }
  }
  return c;
}

VariationalParams to_constrained(const Vec27& x) {
  return unpack_params(transform_chain(x).theta);
}

namespace {

/// Gaussian parameters of log(band flux) under one type hypothesis, plus
/// the log-derivative vectors of the first and second flux moments with
/// respect to the 10 block coordinates [flux loc, flux var, color locs,
/// color vars].
struct FluxBlock {
  double mean = 0.0;    // E[b]
  double second = 0.0;  // E[b^2]
  Vec10 alpha = Vec10::Zero();  // dlog E[b] /d block
  Vec10 beta = Vec10::Zero();   // dlog E[b^2]/d block
};

FluxBlock make_flux_block(const TypeParams& tp, int band) {
  const auto& w = color_coeffs()[band];
  double m = tp.log_flux_loc;
  double v = tp.log_flux_var;
  for (int j = 0; j < kNumColors; ++j) {
    m += w[j] * tp.color_loc[j];
    v += std::abs(w[j]) * tp.color_var[j];
  }
  FluxBlock fb;
  fb.mean = std::exp(m + 0.5 * v);
  fb.second = std::exp(2.0 * m + 2.0 * v);
  fb.alpha[param::kFluxLoc] = 1.0;
  fb.alpha[param::kFluxVar] = 0.5;
  fb.beta[param::kFluxLoc] = 2.0;
  fb.beta[param::kFluxVar] = 2.0;
  for (int j = 0; j < kNumColors; ++j) {
    fb.alpha[param::kColorLoc + j] = w[j];
    fb.alpha[param::kColorVar + j] = 0.5 * std::abs(w[j]);
    fb.beta[param::kColorLoc + j] = 2.0 * w[j];
    fb.beta[param::kColorVar + j] = 2.0 * std::abs(w[j]);
  }
  return fb;
}

/// Star footprint derivatives with respect to the world position.
struct StarGeom {
  double v = 0.0;
  Vec2 d = Vec2::Zero();
  Mat2 h = Mat2::Zero();
};

/// Galaxy footprint derivatives with respect to the six geometry
/// coordinates (pos_x, pos_y, profile_mix, scale, axis_ratio, angle).
struct GalGeom {
  double v = 0.0;
  Vec6 d = Vec6::Zero();
  Mat6 h = Mat6::Zero();
};

/// Per-covariance-entry value and derivatives with respect to
/// (scale_arcsec, axis_ratio, angle_deg).
struct ShapeEntry {
  double v = 0.0;
  Eigen::Vector3d d = Eigen::Vector3d::Zero();
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
};

/// Pixel-space galaxy covariance per unit profile variance,
/// W = (scale/3600)^2 * A B(q, angle) A^T, for one image's WCS matrix A,
/// differentiated through the three shape coordinates.
struct ShapeFrame {
  ShapeEntry w[3];  // entries (c11, c12, c22)
};

ShapeFrame make_shape_frame(const GalaxyShape& shape, const Mat2& A) {
  if (!(shape.axis_ratio > 0.0) || !(shape.scale_arcsec > 0.0)) {
    throw std::domain_error("galaxy geometry: degenerate shape");
  }
  const double q = shape.axis_ratio;
  const double u = 2.0 * shape.angle_deg * M_PI / 180.0;
  const double du_dangle = M_PI / 90.0;
  const double cu = std::cos(u), su = std::sin(u);
  const double a = 0.5 * (1.0 + q * q);
  const double b = 0.5 * (1.0 - q * q);

  // B and partials with respect to (q, u); entries (11, 12, 22)
  auto bmat = [&](double b11, double b12, double b22) {
    Mat2 m;
    m << b11, b12, b12, b22;
    return m;
  };
  const Mat2 B = bmat(a + b * cu, b * su, a - b * cu);
  const Mat2 Bq = bmat(q * (1.0 - cu), -q * su, q * (1.0 + cu));
  const Mat2 Bu = bmat(-b * su, b * cu, b * su);
  const Mat2 Bqq = bmat(1.0 - cu, -su, 1.0 + cu);
  const Mat2 Bqu = bmat(q * su, -q * cu, -q * su);
  const Mat2 Buu = bmat(-b * cu, -b * su, b * cu);

  auto conj = [&](const Mat2& m) -> Mat2 { return A * m * A.transpose(); };
  const Mat2 G = conj(B), Gq = conj(Bq), Gu = conj(Bu);
  const Mat2 Gqq = conj(Bqq), Gqu = conj(Bqu), Guu = conj(Buu);

  const double s_deg = shape.scale_arcsec / kArcsecPerDeg;
  const double f = s_deg * s_deg;
  const double fs = 2.0 * s_deg / kArcsecPerDeg;        // df/dscale
  const double fss = 2.0 / (kArcsecPerDeg * kArcsecPerDeg);

  ShapeFrame frame;
  const int rows[3] = {0, 0, 1};
  const int cols[3] = {0, 1, 1};
  for (int m = 0; m < 3; ++m) {
    const int r = rows[m], c = cols[m];
    ShapeEntry& e = frame.w[m];
    e.v = f * G(r, c);
    e.d[0] = fs * G(r, c);
    e.d[1] = f * Gq(r, c);
    e.d[2] = f * Gu(r, c) * du_dangle;
    e.h(0, 0) = fss * G(r, c);
    e.h(0, 1) = e.h(1, 0) = fs * Gq(r, c);
    e.h(0, 2) = e.h(2, 0) = fs * Gu(r, c) * du_dangle;
    e.h(1, 1) = f * Gqq(r, c);
    e.h(1, 2) = e.h(2, 1) = f * Gqu(r, c) * du_dangle;
    e.h(2, 2) = f * Guu(r, c) * du_dangle * du_dangle;
  }
  return frame;
}

/// One Gaussian-mixture family (exponential or de Vaucouleurs) evaluated
/// at a pixel offset: derivatives with respect to (pos, scale, axis,
/// angle) in a 5-vector layout (pos_x, pos_y, shape0..2).
struct FamilyGeom {
  double v = 0.0;
  Eigen::Matrix<double, 5, 1> d = Eigen::Matrix<double, 5, 1>::Zero();
  Eigen::Matrix<double, 5, 5> h = Eigen::Matrix<double, 5, 5>::Zero();
};

void accumulate_family(FamilyGeom& out, const Vec2& delta, const Mat2& A,
                       const PsfModel& psf, const ShapeFrame& frame,
                       std::span<const double> comp_weights,
                       std::span<const double> comp_variances) {
  for (const auto& pc : psf.components) {
    const double s2 = pc.sigma * pc.sigma;
    for (std::size_t l = 0; l < comp_weights.size(); ++l) {
      const double vl = comp_variances[l];
      const double weight = pc.weight * comp_weights[l];
      const double c11 = s2 + vl * frame.w[0].v;
      const double c12 = vl * frame.w[1].v;
      const double c22 = s2 + vl * frame.w[2].v;
      // skip negligible components
      const double det = c11 * c22 - c12 * c12;
      const double qform =
          (c22 * delta.x() * delta.x() - 2.0 * c12 * delta.x() * delta.y() +
           c11 * delta.y() * delta.y()) / det;
      if (qform > 100.0) continue;
      const Gauss2dDerivs g =
          gauss2d_with_derivs(delta.x(), delta.y(), c11, c12, c22);

      out.v += weight * g.value;

      // dC_m/dshape_j = vl * frame.w[m].d[j]
      Eigen::Matrix<double, 3, 3> dC;  // rows: entry m, cols: shape j
      for (int m = 0; m < 3; ++m) dC.row(m) = vl * frame.w[m].d.transpose();

      // gradient: position (chain through delta = -A) and shape
      const Eigen::Vector2d gd = g.grad.head<2>();
      out.d.head<2>() += weight * (-A.transpose() * gd);
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int m = 0; m < 3; ++m) acc += g.grad[2 + m] * dC(m, j);
        out.d[2 + j] += weight * acc;
      }

      // hessian blocks
      const Mat2 hdd = g.hess.topLeftCorner<2, 2>();
      out.h.topLeftCorner<2, 2>() += weight * (A.transpose() * hdd * A);
      for (int j = 0; j < 3; ++j) {
        Eigen::Vector2d cross = Eigen::Vector2d::Zero();
        for (int m = 0; m < 3; ++m) {
          cross += g.hess.block<2, 1>(0, 2 + m) * dC(m, j);
        }
        const Eigen::Vector2d hpj = weight * (-A.transpose() * cross);
        out.h.block<2, 1>(0, 2 + j) += hpj;
        out.h.block<1, 2>(2 + j, 0) += hpj.transpose();
      }
      for (int j = 0; j < 3; ++j) {
        for (int jj = j; jj < 3; ++jj) {
          double acc = 0.0;
          for (int m = 0; m < 3; ++m) {
            for (int mm = 0; mm < 3; ++mm) {
              acc += g.hess(2 + m, 2 + mm) * dC(m, j) * dC(mm, jj);
            }
            acc += g.grad[2 + m] * vl * frame.w[m].h(j, jj);
          }
          out.h(2 + j, 2 + jj) += weight * acc;
          if (jj != j) out.h(2 + jj, 2 + j) += weight * acc;
        }
      }
    }
  }
}

StarGeom star_geometry(const Vec2& delta, const Mat2& A, const PsfModel& psf) {
  StarGeom out;
  for (const auto& pc : psf.components) {
    const double s2 = pc.sigma * pc.sigma;
    const double r2 = delta.squaredNorm();
    if (r2 / s2 > 200.0) continue;
    const double phi =
        pc.weight * std::exp(-0.5 * r2 / s2) / (2.0 * M_PI * s2);
    out.v += phi;
    const Vec2 dphi_dd = -phi / s2 * delta;
    out.d += -A.transpose() * dphi_dd;
    const Mat2 hdd =
        phi * (delta * delta.transpose() / (s2 * s2) - Mat2::Identity() / s2);
    out.h += A.transpose() * hdd * A;
  }
  return out;
}

GalGeom galaxy_geometry(const Vec2& delta, const Mat2& A, const PsfModel& psf,
                        const ShapeFrame& frame, double profile_mix) {
  using namespace galaxy_profiles;
  FamilyGeom fe, fd;
  accumulate_family(fe, delta, A, psf, frame, kExpWeights, kExpVariances);
  accumulate_family(fd, delta, A, psf, frame, kDevWeights, kDevVariances);

  // combine with the (linear) profile mix; 6-vector layout
  // (pos_x, pos_y, mix, scale, axis, angle)
  const double we = 1.0 - profile_mix;
  const double wd = profile_mix;
  auto lift = [](int i) { return i < 2 ? i : i + 1; };  // 5-dim -> 6-dim slot

  GalGeom out;
  out.v = we * fe.v + wd * fd.v;
  for (int i = 0; i < 5; ++i) {
    out.d[lift(i)] = we * fe.d[i] + wd * fd.d[i];
  }
  out.d[2] = fd.v - fe.v;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      out.h(lift(i), lift(j)) = we * fe.h(i, j) + wd * fd.h(i, j);
    }
    const double cross = fd.d[i] - fe.d[i];
    out.h(2, lift(i)) = cross;
    out.h(lift(i), 2) = cross;
  }
  out.h(2, 2) = 0.0;
  return out;
}

double singular_max(const Mat2& A) {
  Eigen::JacobiSVD<Mat2> svd(A);
  return svd.singularValues()(0);
}

}  // namespace

FluxMoments flux_moments(const VariationalParams& vp, bool star_type,
                         int band) {
  if (band < 0 || band >= kNumBands) {
    throw std::domain_error("flux_moments: bad band");
  }
  const FluxBlock fb =
      make_flux_block(star_type ? vp.star : vp.galaxy, band);
  return {fb.mean, fb.second};
}

SourceContext make_source_context(const VariationalParams& init,
                                  std::vector<SourceParams> neighbors,
                                  std::span<const Image* const> images,
                                  const Prior& prior,
                                  const PatchPolicy& policy) {
  SourceContext ctx;
  ctx.init = init;
  ctx.neighbors = std::move(neighbors);
  ctx.prior = prior;

  // precompute neighbor band fluxes once
  std::vector<std::array<double, kNumBands>> nb_flux;
  nb_flux.reserve(ctx.neighbors.size());
  for (const auto& nb : ctx.neighbors) {
    nb_flux.push_back(band_fluxes(nb.ref_flux, nb.colors));
  }

  for (const Image* img : images) {
    const ImageMetadata& meta = img->meta;
    const Vec2 proj = meta.wcs.world_to_pixel(init.position);
    const double anorm = singular_max(meta.wcs.pix_per_deg);
    const double s_px = init.shape.scale_arcsec / kArcsecPerDeg * anorm;
    const double prof_var =
        galaxy_profiles::effective_variance(init.shape.profile_mix);
    const double sigma = std::sqrt(meta.psf.max_sigma() * meta.psf.max_sigma() +
                                   prof_var * s_px * s_px);
    const double radius =
        std::min(policy.sigma_multiplier * sigma, policy.max_radius_px);

    const int x0 = std::max(0, static_cast<int>(std::floor(proj.x() - radius)));
    const int x1 = std::min(meta.width,
                            static_cast<int>(std::ceil(proj.x() + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(proj.y() - radius)));
    const int y1 = std::min(meta.height,
                            static_cast<int>(std::ceil(proj.y() + radius)));
    if (x0 >= x1 || y0 >= y1) continue;

    ImagePatch patch;
    patch.meta = meta;
    patch.window = {x0, y0, x1 - x0, y1 - y0};
    patch.counts.resize(static_cast<std::size_t>(patch.window.width) *
                        patch.window.height);
    patch.base_rate.resize(patch.counts.size());
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const std::size_t i =
            static_cast<std::size_t>(y - y0) * patch.window.width + (x - x0);
        const std::int32_t count = img->at(x, y);
        patch.counts[i] = count;
        double base = meta.sky_background;
        for (std::size_t n = 0; n < ctx.neighbors.size(); ++n) {
          base += nb_flux[n][meta.band] *
                  unit_flux_pixel_weight(geometry_of(ctx.neighbors[n]), meta,
                                         x, y);
        }
        patch.base_rate[i] = base;
        patch.lgamma_sum += std::lgamma(static_cast<double>(count) + 1.0);
      }
    }
    ctx.patches.push_back(std::move(patch));
  }
  return ctx;
}

VariationalParams init_from_estimate(const SourceParams& estimate,
                                     const Prior& prior) {
  VariationalParams vp;
  vp.p_star = estimate.is_star ? 0.8 : 0.2;
  const double log_flux = std::log(std::max(estimate.ref_flux, 1e-6));
  for (TypeParams* tp : {&vp.star, &vp.galaxy}) {
    tp->log_flux_loc = log_flux;
    tp->log_flux_var = 0.25;
    tp->color_loc = estimate.colors;
    tp->color_var = Eigen::Vector4d::Constant(0.25);
  }
  (void)prior;
  vp.position = estimate.position;
  vp.shape = estimate.shape;
  vp.shape.profile_mix = std::clamp(vp.shape.profile_mix, 1e-3, 1.0 - 1e-3);
  vp.shape.axis_ratio = std::clamp(vp.shape.axis_ratio, 0.05, 1.0 - 1e-6);
  vp.shape.scale_arcsec = std::max(vp.shape.scale_arcsec, 0.05);
  vp.shape.angle_deg = std::clamp(vp.shape.angle_deg, 0.2, 179.8);
  return vp;
}

RateMoments pixel_rate_moments(const SourceContext& ctx,
                               const VariationalParams& vp, int patch_index,
                               int px, int py) {
  const ImagePatch& patch = ctx.patches.at(patch_index);
  const PixelWindow& w = patch.window;
  if (px < w.x0 || px >= w.x0 + w.width || py < w.y0 ||
      py >= w.y0 + w.height) {
    throw std::domain_error("pixel_rate_moments: pixel outside patch");
  }
  const std::size_t i =
      static_cast<std::size_t>(py - w.y0) * w.width + (px - w.x0);
  const double base = patch.base_rate[i];
  if (!ctx.has_target) return {base, 0.0};

  const double gs = unit_flux_pixel_weight({vp.position, true, vp.shape},
                                           patch.meta, px, py);
  const double gg = unit_flux_pixel_weight({vp.position, false, vp.shape},
                                           patch.meta, px, py);
  const FluxMoments ms = flux_moments(vp, true, patch.meta.band);
  const FluxMoments mg = flux_moments(vp, false, patch.meta.band);
  const double p = vp.p_star;
  const double s = p * ms.mean * gs + (1.0 - p) * mg.mean * gg;
  const double s2 = p * ms.second * gs * gs + (1.0 - p) * mg.second * gg * gg;
  return {base + s, s2 - s * s};
}

namespace {

/// Adds the second-derivative structure of a mixed moment
/// X = p * M_s * g_s + (1-p) * M_g * g_g, scaled by `coef`, to H.
/// `as`/`ag` are the log-derivative vectors of the flux moments, and the
/// geometry arguments carry (value, gradient, hessian) of g_s (position
/// only) and g_g (six geometry coordinates).
void add_moment_hessian(Mat27& H, double coef, double p, double ms, double mg,
                        const Vec10& as, const Vec10& ag, double sv,
                        const Vec2& sd, const Mat2& sh, double gv,
                        const Vec6& gd, const Mat6& gh) {
  if (coef == 0.0) return;
  const int S = param::kStarBlock, G = param::kGalBlock;
  const int P = param::kPosition;

  // (p, flux blocks)
  H.block<1, 10>(param::kPStar, S) += coef * ms * sv * as.transpose();
  H.block<10, 1>(S, param::kPStar) += coef * ms * sv * as;
  H.block<1, 10>(param::kPStar, G) -= coef * mg * gv * ag.transpose();
  H.block<10, 1>(G, param::kPStar) -= coef * mg * gv * ag;

  // (p, geometry)
  Vec6 pgeo = -mg * gd;
  pgeo.head<2>() += ms * sd;
  H.block<1, 6>(param::kPStar, P) += coef * pgeo.transpose();
  H.block<6, 1>(P, param::kPStar) += coef * pgeo;

  // (flux, flux)
  H.block<10, 10>(S, S) += (coef * p * ms * sv) * (as * as.transpose());
  H.block<10, 10>(G, G) +=
      (coef * (1.0 - p) * mg * gv) * (ag * ag.transpose());

  // (flux, geometry)
  const Eigen::Matrix<double, 10, 2> sxp =
      (coef * p * ms) * (as * sd.transpose());
  H.block<10, 2>(S, P) += sxp;
  H.block<2, 10>(P, S) += sxp.transpose();
  const Eigen::Matrix<double, 10, 6> gxp =
      (coef * (1.0 - p) * mg) * (ag * gd.transpose());
  H.block<10, 6>(G, P) += gxp;
  H.block<6, 10>(P, G) += gxp.transpose();

  // (geometry, geometry)
  H.block<2, 2>(P, P) += (coef * p * ms) * sh;
  H.block<6, 6>(P, P) += (coef * (1.0 - p) * mg) * gh;
}

}  // namespace

Evaluation expected_log_likelihood(const SourceContext& ctx,
                                   const VariationalParams& vp) {
  Evaluation out;
  const double p = vp.p_star;

  for (const ImagePatch& patch : ctx.patches) {
    const ImageMetadata& meta = patch.meta;
    const Mat2& A = meta.wcs.pix_per_deg;
    const Vec2 proj = meta.wcs.world_to_pixel(vp.position);

    if (!ctx.has_target) {
      for (std::size_t i = 0; i < patch.counts.size(); ++i) {
        const double e = patch.base_rate[i];
        if (!(e > 0.0) && patch.counts[i] > 0) {
          throw std::domain_error("expected_log_likelihood: zero rate");
        }
        out.value += patch.counts[i] * std::log(e) - e;
      }
      out.value -= patch.lgamma_sum;
      continue;
    }

    const FluxBlock fs = make_flux_block(vp.star, meta.band);
    const FluxBlock fg = make_flux_block(vp.galaxy, meta.band);
    const ShapeFrame frame = make_shape_frame(vp.shape, A);

    for (int iy = 0; iy < patch.window.height; ++iy) {
      for (int ix = 0; ix < patch.window.width; ++ix) {
        const std::size_t i =
            static_cast<std::size_t>(iy) * patch.window.width + ix;
        const Vec2 center(patch.window.x0 + ix + 0.5,
                          patch.window.y0 + iy + 0.5);
        const Vec2 delta = center - proj;

        const StarGeom gs = star_geometry(delta, A, meta.psf);
        const GalGeom gg =
            galaxy_geometry(delta, A, meta.psf, frame, vp.shape.profile_mix);

        const double x = patch.counts[i];
        const double base = patch.base_rate[i];

        const double s = p * fs.mean * gs.v + (1.0 - p) * fg.mean * gg.v;
        const double e = base + s;
        const double e2 =
            p * fs.second * gs.v * gs.v + (1.0 - p) * fg.second * gg.v * gg.v;
        const double var = e2 - s * s;
        if (!(e > 0.0)) {
          throw std::domain_error("expected_log_likelihood: non-positive rate");
        }

        // first derivatives of S (= dE) and E2 over the 27 coordinates
        Vec27 dS = Vec27::Zero();
        Vec27 dE2 = Vec27::Zero();
        dS[param::kPStar] = fs.mean * gs.v - fg.mean * gg.v;
        dS.segment<10>(param::kStarBlock) = (p * gs.v * fs.mean) * fs.alpha;
        dS.segment<10>(param::kGalBlock) =
            ((1.0 - p) * gg.v * fg.mean) * fg.alpha;
        dS.segment<2>(param::kPosition) += (p * fs.mean) * gs.d;
        dS.segment<6>(param::kPosition) += ((1.0 - p) * fg.mean) * gg.d;

        dE2[param::kPStar] =
            fs.second * gs.v * gs.v - fg.second * gg.v * gg.v;
        dE2.segment<10>(param::kStarBlock) =
            (p * gs.v * gs.v * fs.second) * fs.beta;
        dE2.segment<10>(param::kGalBlock) =
            ((1.0 - p) * gg.v * gg.v * fg.second) * fg.beta;
        dE2.segment<2>(param::kPosition) +=
            (p * fs.second * 2.0 * gs.v) * gs.d;
        dE2.segment<6>(param::kPosition) +=
            ((1.0 - p) * fg.second * 2.0 * gg.v) * gg.d;

        const Vec27 dV = dE2 - 2.0 * s * dS;

        const double le = x * (1.0 / e + var / (e * e * e)) - 1.0;
        const double lv = -x / (2.0 * e * e);
        const double lee = x * (-1.0 / (e * e) - 3.0 * var / (e * e * e * e));
        const double lev = x / (e * e * e);

        out.value += x * (std::log(e) - var / (2.0 * e * e)) - e;
        out.grad += le * dS + lv * dV;

        // rank-2 part
        const double c1 = lee - 2.0 * lv;
        out.hess += c1 * (dS * dS.transpose());
        out.hess += lev * (dS * dV.transpose() + dV * dS.transpose());

        // curvature of S and E2 themselves
        const double a = le - 2.0 * s * lv;
        add_moment_hessian(out.hess, a, p, fs.mean, fg.mean, fs.alpha,
                           fg.alpha, gs.v, gs.d, gs.h, gg.v, gg.d, gg.h);
        // second-moment geometry: g^2 has gradient 2 g dg and hessian
        // 2 (dg dg^T + g d2g)
        const Vec2 sd2 = 2.0 * gs.v * gs.d;
        const Mat2 sh2 = 2.0 * (gs.d * gs.d.transpose() + gs.v * gs.h);
        const Vec6 gd2 = 2.0 * gg.v * gg.d;
        const Mat6 gh2 = 2.0 * (gg.d * gg.d.transpose() + gg.v * gg.h);
        add_moment_hessian(out.hess, lv, p, fs.second, fg.second, fs.beta,
                           fg.beta, gs.v * gs.v, sd2, sh2, gg.v * gg.v, gd2,
                           gh2);
      }
    }
    out.value -= patch.lgamma_sum;
  }
  return out;
}

Evaluation kl_divergence(const VariationalParams& vp, const Prior& prior) {
  prior.validate();
  const double p = vp.p_star;
  if (!(p > 0.0 && p < 1.0)) {
    throw std::domain_error("kl_divergence: p_star out of (0,1)");
  }

  Evaluation out;

  // Bernoulli factor
  const double p0 = prior.p_star;
  out.value += p * std::log(p / p0) + (1.0 - p) * std::log((1.0 - p) / (1.0 - p0));
  out.grad[param::kPStar] += logit(p) - logit(p0);
  out.hess(param::kPStar, param::kPStar) += 1.0 / p + 1.0 / (1.0 - p);

  // per-type conjugate factors: lognormal flux and Gaussian colors reduce
  // to Gaussian KL terms
  struct TypeAccum {
    double value = 0.0;
    Vec10 grad = Vec10::Zero();
    Vec10 hess_diag = Vec10::Zero();
  };
  auto type_kl = [](const TypeParams& tp, const TypePrior& prior_t) {
    TypeAccum acc;
    auto add_term = [&](int loc_i, int var_i, double m, double v, double m0,
                        double v0) {
      acc.value += 0.5 * (v / v0 + (m - m0) * (m - m0) / v0 - 1.0 +
                          std::log(v0 / v));
      acc.grad[loc_i] += (m - m0) / v0;
      acc.grad[var_i] += 0.5 * (1.0 / v0 - 1.0 / v);
      acc.hess_diag[loc_i] += 1.0 / v0;
      acc.hess_diag[var_i] += 0.5 / (v * v);
    };
    add_term(param::kFluxLoc, param::kFluxVar, tp.log_flux_loc,
             tp.log_flux_var, prior_t.log_flux_mean, prior_t.log_flux_var);
    for (int j = 0; j < kNumColors; ++j) {
      add_term(param::kColorLoc + j, param::kColorVar + j, tp.color_loc[j],
               tp.color_var[j], prior_t.color_mean[j], prior_t.color_var[j]);
    }
    return acc;
  };

  const TypeAccum ks = type_kl(vp.star, prior.star);
  const TypeAccum kg = type_kl(vp.galaxy, prior.galaxy);

  out.value += p * ks.value + (1.0 - p) * kg.value;
  out.grad[param::kPStar] += ks.value - kg.value;
  out.grad.segment<10>(param::kStarBlock) += p * ks.grad;
  out.grad.segment<10>(param::kGalBlock) += (1.0 - p) * kg.grad;

  out.hess.block<1, 10>(param::kPStar, param::kStarBlock) +=
      ks.grad.transpose();
  out.hess.block<10, 1>(param::kStarBlock, param::kPStar) += ks.grad;
  out.hess.block<1, 10>(param::kPStar, param::kGalBlock) -=
      kg.grad.transpose();
  out.hess.block<10, 1>(param::kGalBlock, param::kPStar) -= kg.grad;
  out.hess.block<10, 10>(param::kStarBlock, param::kStarBlock).diagonal() +=
      p * ks.hess_diag;
  out.hess.block<10, 10>(param::kGalBlock, param::kGalBlock).diagonal() +=
      (1.0 - p) * kg.hess_diag;
  return out;
}

ElboResult elbo(const SourceContext& ctx, const Vec27& x) {
  ElboResult res;
  if (!x.allFinite()) return res;

  const TransformChain chain = transform_chain(x);
  if (!chain.theta.allFinite()) return res;
  const VariationalParams vp = unpack_params(chain.theta);

  Evaluation total;
  try {
    const Evaluation ell = expected_log_likelihood(ctx, vp);
    const Evaluation kl = kl_divergence(vp, ctx.prior);
    total.value = ell.value - kl.value;
    total.grad = ell.grad - kl.grad;
    total.hess = ell.hess - kl.hess;
  } catch (const std::domain_error&) {
    return res;
  }

  // compose with the componentwise transform
  res.value = total.value;
  res.grad = total.grad.cwiseProduct(chain.dtheta);
  res.hess = chain.dtheta.asDiagonal() * total.hess * chain.dtheta.asDiagonal();
  res.hess.diagonal() += total.grad.cwiseProduct(chain.d2theta);

  res.ok = std::isfinite(res.value) && res.grad.allFinite() &&
           res.hess.allFinite();
  return res;
}

}  // namespace celeste
