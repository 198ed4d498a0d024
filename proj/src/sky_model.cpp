#include "celeste/sky_model.hpp"

#include <cmath>
#include <stdexcept>

#include "celeste/gauss2d.hpp"
#include "celeste/rng.hpp"

namespace celeste {

void Prior::validate() const {
  if (!(p_star > 0.0 && p_star < 1.0)) {
    throw std::domain_error("Prior: p_star must be in (0,1)");
  }
  for (const TypePrior* t : {&star, &galaxy}) {
    if (!(t->log_flux_var > 0.0)) {
      throw std::domain_error("Prior: log_flux_var must be positive");
    }
    if (!(t->color_var.minCoeff() > 0.0)) {
      throw std::domain_error("Prior: color_var must be positive");
    }
  }
}

void PsfModel::validate() const {
  if (components.empty()) {
    throw std::domain_error("PsfModel: needs at least one component");
  }
  double wsum = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0) || !(c.sigma > 0.0)) {
      throw std::domain_error("PsfModel: weights and sigmas must be positive");
    }
    wsum += c.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-12) {
    throw std::domain_error("PsfModel: weights must sum to 1");
  }
}

double PsfModel::max_sigma() const {
  double m = 0.0;
  for (const auto& c : components) m = std::max(m, c.sigma);
  return m;
}

PsfModel default_psf() {
  return PsfModel{{{0.85, 1.1}, {0.15, 2.4}}};
}

Wcs make_wcs(double arcsec_per_pixel, const Eigen::Vector2d& world_center,
             int width, int height) {
  Wcs w;
  const double scale = kArcsecPerDeg / arcsec_per_pixel;  // pixels per degree
  w.pix_per_deg = Eigen::Matrix2d::Identity() * scale;
  w.world_ref = world_center;
  w.pixel_ref = Eigen::Vector2d(0.5 * width, 0.5 * height);
  return w;
}

namespace galaxy_profiles {

double exp_profile_density(double r) {
  const double h = 1.0 / kExpB;
  return std::exp(-r / h) / (2.0 * M_PI * h * h);
}

double dev_profile_density(double r) {
  constexpr double kFact8 = 40320.0;
  const double i0 = std::pow(kDevB, 8) / (2.0 * M_PI * kFact8);
  return i0 * std::exp(-kDevB * std::pow(std::max(r, 0.0), 0.25));
}

double effective_variance(double profile_mix) {
  double ve = 0.0, vd = 0.0;
  for (int l = 0; l < kNumComponents; ++l) {
    ve += kExpWeights[l] * kExpVariances[l];
    vd += kDevWeights[l] * kDevVariances[l];
  }
  return (1.0 - profile_mix) * ve + profile_mix * vd;
}

}  // namespace galaxy_profiles

std::array<double, kNumBands> band_fluxes(double ref_flux,
                                          const Eigen::Vector4d& colors) {
  if (!(ref_flux > 0.0) || !std::isfinite(ref_flux) ||
      !colors.allFinite()) {
    throw std::domain_error("band_fluxes: inputs must be finite, flux > 0");
  }
  std::array<double, kNumBands> b{};
  b[kRefBand] = ref_flux;
  for (int j = kRefBand; j < kNumBands - 1; ++j) {
    b[j + 1] = b[j] * std::exp(colors[j]);
  }
  for (int j = kRefBand - 1; j >= 0; --j) {
    b[j] = b[j + 1] / std::exp(colors[j]);
  }
  return b;
}

namespace {

/// 2x2 world covariance of the galaxy ellipse per unit profile variance:
/// R(angle) diag(scale^2, (axis_ratio*scale)^2) R(angle)^T in degrees^2.
Eigen::Matrix2d galaxy_world_covariance(const GalaxyShape& shape) {
  const double s_deg = shape.scale_arcsec / kArcsecPerDeg;
  const double a = shape.angle_deg * M_PI / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  Eigen::Matrix2d rot;
  rot << c, -s, s, c;
  Eigen::Matrix2d diag = Eigen::Matrix2d::Zero();
  diag(0, 0) = s_deg * s_deg;
  diag(1, 1) = shape.axis_ratio * shape.axis_ratio * s_deg * s_deg;
  return rot * diag * rot.transpose();
}

}  // namespace

double unit_flux_pixel_weight(const SourceGeometry& src,
                              const ImageMetadata& meta, int px, int py) {
  if (!meta.contains_pixel(px, py)) {
    throw std::domain_error("unit_flux_pixel_weight: pixel out of bounds");
  }
  const Eigen::Vector2d center(px + 0.5, py + 0.5);
  const Eigen::Vector2d proj = meta.wcs.world_to_pixel(src.position);
  const Eigen::Vector2d d = center - proj;

  if (src.is_star) {
    double g = 0.0;
    for (const auto& c : meta.psf.components) {
      const double s2 = c.sigma * c.sigma;
      g += c.weight * gauss2d_density(d.x(), d.y(), s2, 0.0, s2);
    }
    return g;
  }

  if (!(src.shape.axis_ratio > 0.0) || !(src.shape.scale_arcsec > 0.0)) {
    throw std::domain_error("unit_flux_pixel_weight: degenerate galaxy shape");
  }
  // pixel-space galaxy covariance per unit profile variance
  const Eigen::Matrix2d world_cov = galaxy_world_covariance(src.shape);
  const Eigen::Matrix2d gpix = meta.wcs.pix_per_deg * world_cov *
                               meta.wcs.pix_per_deg.transpose();
  using namespace galaxy_profiles;
  double g = 0.0;
  for (const auto& psf : meta.psf.components) {
    const double s2 = psf.sigma * psf.sigma;
    for (int l = 0; l < kNumComponents; ++l) {
      const double we = (1.0 - src.shape.profile_mix) * kExpWeights[l];
      const double wd = src.shape.profile_mix * kDevWeights[l];
      if (we > 0.0) {
        const Eigen::Matrix2d cov =
            s2 * Eigen::Matrix2d::Identity() + kExpVariances[l] * gpix;
        g += psf.weight * we *
             gauss2d_density(d.x(), d.y(), cov(0, 0), cov(0, 1), cov(1, 1));
      }
      if (wd > 0.0) {
        const Eigen::Matrix2d cov =
            s2 * Eigen::Matrix2d::Identity() + kDevVariances[l] * gpix;
        g += psf.weight * wd *
             gauss2d_density(d.x(), d.y(), cov(0, 0), cov(0, 1), cov(1, 1));
      }
    }
  }
  return g;
}

double expected_rate(const std::vector<SourceParams>& catalog,
                     const ImageMetadata& meta, int px, int py) {
  double rate = meta.sky_background;
  for (const auto& src : catalog) {
    const auto fluxes = band_fluxes(src.ref_flux, src.colors);
    rate += fluxes[meta.band] *
            unit_flux_pixel_weight(geometry_of(src), meta, px, py);
  }
  return rate;
}

Image sample_image(const std::vector<SourceParams>& catalog,
                   const ImageMetadata& meta, std::uint64_t seed) {
  Image img;
  img.meta = meta;
  img.pixels.assign(static_cast<std::size_t>(meta.width) * meta.height, 0);
  Rng rng(mix_seed(seed, meta.id));

  // per-source band flux cached once
  std::vector<double> flux(catalog.size());
  for (std::size_t s = 0; s < catalog.size(); ++s) {
    flux[s] = band_fluxes(catalog[s].ref_flux, catalog[s].colors)[meta.band];
  }
  for (int y = 0; y < meta.height; ++y) {
    for (int x = 0; x < meta.width; ++x) {
      double rate = meta.sky_background;
      for (std::size_t s = 0; s < catalog.size(); ++s) {
        rate += flux[s] *
                unit_flux_pixel_weight(geometry_of(catalog[s]), meta, x, y);
      }
      img.pixels[y * meta.width + x] =
          static_cast<std::int32_t>(rng.poisson(rate));
    }
  }
  return img;
}

std::vector<SourceParams> sample_catalog(const Prior& prior,
                                         const RegionRect& region, int count,
                                         const ClusterConfig& clustering,
                                         std::uint64_t seed) {
  if (count < 0) throw std::domain_error("sample_catalog: count must be >= 0");
  if (region.empty()) throw std::domain_error("sample_catalog: empty region");
  prior.validate();

  Rng rng(seed);
  std::vector<Eigen::Vector2d> centers;
  for (int k = 0; k < clustering.n_clusters; ++k) {
    centers.emplace_back(rng.uniform(region.lo.x(), region.hi.x()),
                         rng.uniform(region.lo.y(), region.hi.y()));
  }

  auto draw_position = [&]() -> Eigen::Vector2d {
    if (!centers.empty() && rng.uniform() < clustering.cluster_weight) {
      const auto& c = centers[rng.uniform_below(centers.size())];
      for (int tries = 0; tries < 64; ++tries) {
        Eigen::Vector2d p(c.x() + rng.normal(0, clustering.cluster_sigma_deg),
                          c.y() + rng.normal(0, clustering.cluster_sigma_deg));
        if (region.contains(p)) return p;
      }
    }
    return {rng.uniform(region.lo.x(), region.hi.x()),
            rng.uniform(region.lo.y(), region.hi.y())};
  };

  std::vector<SourceParams> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    SourceParams s;
    s.is_star = rng.uniform() < prior.p_star;
    const TypePrior& tp = s.is_star ? prior.star : prior.galaxy;
    s.ref_flux = rng.lognormal(tp.log_flux_mean, std::sqrt(tp.log_flux_var));
    for (int j = 0; j < kNumColors; ++j) {
      s.colors[j] = rng.normal(tp.color_mean[j], std::sqrt(tp.color_var[j]));
    }
    s.position = draw_position();
    if (!s.is_star) {
      // documented shape defaults: lognormal scale around 1.5", uniform
      // axis ratio on (0.2, 1], uniform angle, arcsine profile mix
      s.shape.scale_arcsec = rng.lognormal(std::log(1.5), 0.5);
      s.shape.axis_ratio = 0.2 + 0.8 * rng.uniform_pos();
      s.shape.angle_deg = rng.uniform(0.0, 180.0);
      s.shape.profile_mix = rng.arcsine_beta();
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace celeste
