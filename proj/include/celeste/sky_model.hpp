#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace celeste {

// Five filter bands ordered by wavelength; brightness is anchored in the
// reference band and colors are log flux ratios of adjacent bands.
constexpr int kNumBands = 5;
constexpr int kRefBand = 2;
constexpr int kNumColors = kNumBands - 1;

constexpr double kArcsecPerDeg = 3600.0;

/// Galaxy morphology: point-estimated geometry of an elliptical light
/// profile. `profile_mix` is the weight on the de Vaucouleurs component
/// (0 = pure exponential disc). `angle_deg` is the major-axis orientation
/// measured counterclockwise from the +x world axis, modulo 180.
struct GalaxyShape {
  double profile_mix = 0.5;    // in [0, 1]
  double scale_arcsec = 1.5;   // effective (half-light) radius, > 0
  double axis_ratio = 0.7;     // minor/major, in (0, 1]
  double angle_deg = 0.0;      // in [0, 180)
};

/// One catalog entry: the physical parameters of a star or galaxy.
struct SourceParams {
  bool is_star = true;
  double ref_flux = 1.0;                       // linear flux, > 0
  Eigen::Vector4d colors = Eigen::Vector4d::Zero();
  Eigen::Vector2d position = Eigen::Vector2d::Zero();  // world degrees
  GalaxyShape shape;                           // ignored when is_star
};

/// Per-type prior block: lognormal reference-band flux and independent
/// Gaussian colors.
struct TypePrior {
  double log_flux_mean = 0.0;
  double log_flux_var = 1.0;
  Eigen::Vector4d color_mean = Eigen::Vector4d::Zero();
  Eigen::Vector4d color_var = Eigen::Vector4d::Constant(0.25);
};

struct Prior {
  double p_star = 0.5;  // in (0, 1)
  TypePrior star;
  TypePrior galaxy;

  void validate() const;  // throws std::domain_error on bad bounds
};

/// Isotropic Gaussian mixture point-spread function, sigmas in pixels.
struct PsfComponent {
  double weight = 1.0;
  double sigma = 1.0;
};

struct PsfModel {
  std::vector<PsfComponent> components;

  void validate() const;  // weights sum to 1 within 1e-12, >= 1 component
  double max_sigma() const;
};

PsfModel default_psf();

/// Affine world->pixel map: pixel = A * (world - world_ref) + pixel_ref.
struct Wcs {
  Eigen::Matrix2d pix_per_deg = Eigen::Matrix2d::Identity();
  Eigen::Vector2d world_ref = Eigen::Vector2d::Zero();
  Eigen::Vector2d pixel_ref = Eigen::Vector2d::Zero();

  Eigen::Vector2d world_to_pixel(const Eigen::Vector2d& w) const {
    return pix_per_deg * (w - world_ref) + pixel_ref;
  }
  Eigen::Vector2d pixel_to_world(const Eigen::Vector2d& p) const {
    return pix_per_deg.inverse() * (p - pixel_ref) + world_ref;
  }
};

/// Square-pixel WCS with the given plate scale, pixel (0,0) corner mapped
/// so that `world_center` lands on the image center.
Wcs make_wcs(double arcsec_per_pixel, const Eigen::Vector2d& world_center,
             int width, int height);

struct ImageMetadata {
  int band = kRefBand;
  int width = 0;
  int height = 0;
  double sky_background = 0.0;  // expected counts per pixel
  PsfModel psf;
  Wcs wcs;
  std::uint32_t id = 0;

  bool contains_pixel(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }
};

/// Observed pixel counts, row-major, index = y * width + x.
struct Image {
  ImageMetadata meta;
  std::vector<std::int32_t> pixels;

  std::int32_t at(int x, int y) const { return pixels[y * meta.width + x]; }
};

/// World-coordinate rectangle (degrees).
struct RegionRect {
  Eigen::Vector2d lo = Eigen::Vector2d::Zero();
  Eigen::Vector2d hi = Eigen::Vector2d::Zero();

  bool empty() const { return !(hi.x() > lo.x()) || !(hi.y() > lo.y()); }
  bool contains(const Eigen::Vector2d& p) const {
    return p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() &&
           p.y() <= hi.y();
  }
};

/// Position clustering for synthetic catalogs: a `cluster_weight` fraction
/// of sources is drawn from Gaussian clumps, the rest uniformly.
struct ClusterConfig {
  double cluster_weight = 0.0;  // in [0, 1]
  int n_clusters = 0;
  double cluster_sigma_deg = 0.01;
};

// -- fixed Gaussian-mixture approximations of the galaxy radial profiles --
//
// Circular mixtures with unit total flux and unit effective radius, fitted
// offline by least squares to the exact exponential and de Vaucouleurs
// profiles on [0, 8] effective radii (weights constrained to sum to 1 and
// the enclosed-flux curve anchored at several radii). Variances are in
// units of effective radius squared. The recorded fit residuals are pinned
// by tests in test_sky_model.
namespace galaxy_profiles {

constexpr int kNumComponents = 6;

constexpr std::array<double, kNumComponents> kExpWeights = {
    7.4267502642498648e-04, 9.5404102260230605e-03, 6.3207844961332499e-02,
    2.4925877078364592e-01, 4.6810844948712294e-01, 2.0914184951545065e-01};
constexpr std::array<double, kNumComponents> kExpVariances = {
    2.9190444956584028e-03, 2.1453022418929983e-02, 9.3883836383525640e-02,
    3.2083513604666081e-01, 9.4302110424256846e-01, 2.5408636309617223e+00};

constexpr std::array<double, kNumComponents> kDevWeights = {
    1.7313063428418193e-03, 1.2111406011085769e-02, 1.1101876986961405e-01,
    2.7927815832840469e-01, 3.8808973505629019e-01, 2.0777062439176344e-01};
constexpr std::array<double, kNumComponents> kDevVariances = {
    6.6323405271921364e-05, 1.0752740109755087e-03, 2.1405068849503300e-02,
    1.5502310428736640e-01, 1.6933862209152850e+00, 2.4716683798039746e+01};

// shape constants of the exact profiles: I_exp ~ exp(-kExpB * r/Re),
// I_dev ~ exp(-kDevB * (r/Re)^(1/4)); both enclose half the flux at Re
constexpr double kExpB = 1.6783469900166612;
constexpr double kDevB = 7.669249442500804;

/// Exact unit-flux radial profile densities (r in effective radii).
double exp_profile_density(double r);
double dev_profile_density(double r);

/// Flux-weighted mean variance of the mixture for the given profile mix;
/// used to size pixel windows around a galaxy.
double effective_variance(double profile_mix);

}  // namespace galaxy_profiles

/// Geometry-only view of a source, sufficient to render its unit-flux
/// pixel footprint.
struct SourceGeometry {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  bool is_star = true;
  GalaxyShape shape;
};

inline SourceGeometry geometry_of(const SourceParams& s) {
  return {s.position, s.is_star, s.shape};
}

// ---------------------------------------------------------------------------
// operations

/// Expands a reference-band flux and adjacent-band log ratios into all five
/// band fluxes: b[ref] = ref_flux, b[j+1] = b[j] * exp(colors[j]).
std::array<double, kNumBands> band_fluxes(double ref_flux,
                                          const Eigen::Vector4d& colors);

/// Expected counts in one pixel from a unit-flux source: the PSF mixture
/// density at the pixel center (stars), or the galaxy mixture convolved
/// with the PSF (galaxies; Gaussian covariances add component-wise).
double unit_flux_pixel_weight(const SourceGeometry& src,
                              const ImageMetadata& meta, int px, int py);

/// Poisson rate at one pixel: sky background plus every source's band flux
/// times its unit-flux weight.
double expected_rate(const std::vector<SourceParams>& catalog,
                     const ImageMetadata& meta, int px, int py);

/// Draws an image pixel-by-pixel from Poisson(expected_rate). Deterministic
/// given the seed.
Image sample_image(const std::vector<SourceParams>& catalog,
                   const ImageMetadata& meta, std::uint64_t seed);

/// Draws a synthetic catalog from the prior over the region. Positions are
/// a mixture of uniform and Gaussian clusters per `clustering`; galaxy
/// shapes follow documented defaults.
std::vector<SourceParams> sample_catalog(const Prior& prior,
                                         const RegionRect& region, int count,
                                         const ClusterConfig& clustering,
                                         std::uint64_t seed);

}  // namespace celeste
