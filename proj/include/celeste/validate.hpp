#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "celeste/sky_model.hpp"

namespace celeste {

/// One catalog CSV row. Truth catalogs carry hard types (p_star 0 or 1)
/// and zero standard deviations; predictions carry q's type probability
/// and posterior standard deviations for flux and colors.
struct CatalogRow {
  std::uint64_t id = 0;
  double p_star = 1.0;
  double ref_flux = 1.0;
  Eigen::Vector4d colors = Eigen::Vector4d::Zero();
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  GalaxyShape shape;
  double sd_ref_flux = 0.0;
  Eigen::Vector4d sd_colors = Eigen::Vector4d::Zero();

  bool is_star() const { return p_star > 0.5; }
};

CatalogRow to_catalog_row(std::uint64_t id, const SourceParams& s);
SourceParams to_source_params(const CatalogRow& row);

// CSV schema: id,p_star,ref_flux,c1..c4,ra,dec,profile_mix,scale,
// axis_ratio,angle,sd_ref_flux,sd_c1..sd_c4. The header accepts is_star
// as an alias for p_star; the sd columns are optional on input.
std::string write_catalog_csv(const std::vector<CatalogRow>& rows);
std::vector<CatalogRow> read_catalog_csv(const std::string& text);
void save_catalog_csv(const std::string& path,
                      const std::vector<CatalogRow>& rows);
std::vector<CatalogRow> load_catalog_csv(const std::string& path);

// ---------------------------------------------------------------------------
// matching and scoring

struct ScoreConfig {
  double max_match_dist_px = 2.0;
  double arcsec_per_pixel = 0.396;  // converts angular error to pixels
  double mag_zero_point = 22.5;     // cancels in magnitude differences
};

/// Greedy one-to-one nearest-neighbor pairing by increasing distance;
/// candidates beyond max_match_dist_px stay unmatched.
struct MatchPairing {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, truth)
  std::vector<std::size_t> unmatched_pred;
  std::vector<std::size_t> unmatched_truth;
};

MatchPairing match_sources(const std::vector<CatalogRow>& pred,
                           const std::vector<CatalogRow>& truth,
                           const ScoreConfig& cfg = {});

/// Error-table metrics. Means over matched pairs; the galaxy-only rows
/// (profile, eccentricity, scale, angle) average over pairs whose truth is
/// a galaxy and are absent when no such pair exists.
struct ScoreReport {
  std::size_t matched = 0;
  std::size_t unmatched_pred = 0;
  std::size_t unmatched_truth = 0;
  std::optional<double> position_err_px;
  std::optional<double> missed_gals;   // truth galaxies called stars
  std::optional<double> missed_stars;  // truth stars called galaxies
  std::optional<double> brightness_err_mag;
  std::array<std::optional<double>, kNumColors> color_errs;
  std::optional<double> profile_err;
  std::optional<double> eccentricity_err;
  std::optional<double> scale_err_arcsec;
  std::optional<double> angle_err_deg;  // modular distance, in [0, 90]
};

ScoreReport score(const std::vector<CatalogRow>& pred,
                  const std::vector<CatalogRow>& truth,
                  const MatchPairing& pairing, const ScoreConfig& cfg = {});

std::string score_report_csv(const ScoreReport& r);
std::string score_report_table(const ScoreReport& r);

}  // namespace celeste
