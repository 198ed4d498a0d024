#include "celeste/validate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "celeste/config_io.hpp"

namespace celeste {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double angular_distance_arcsec(const Eigen::Vector2d& a,
                               const Eigen::Vector2d& b) {
  // flat approximation; survey regions here span well under a degree
  return (a - b).norm() * kArcsecPerDeg;
}

}  // namespace

CatalogRow to_catalog_row(std::uint64_t id, const SourceParams& s) {
  CatalogRow row;
  row.id = id;
  row.p_star = s.is_star ? 1.0 : 0.0;
  row.ref_flux = s.ref_flux;
  row.colors = s.colors;
  row.position = s.position;
  row.shape = s.shape;
  return row;
}

SourceParams to_source_params(const CatalogRow& row) {
  SourceParams s;
  s.is_star = row.is_star();
  s.ref_flux = row.ref_flux;
  s.colors = row.colors;
  s.position = row.position;
  s.shape = row.shape;
  return s;
}

std::string write_catalog_csv(const std::vector<CatalogRow>& rows) {
  std::string out =
      "id,p_star,ref_flux,c1,c2,c3,c4,ra,dec,profile_mix,scale,axis_ratio,"
      "angle,sd_ref_flux,sd_c1,sd_c2,sd_c3,sd_c4\n";
  for (const auto& r : rows) {
    out += std::to_string(r.id);
    out += ',';
    out += fmt(r.p_star);
    out += ',';
    out += fmt(r.ref_flux);
    for (int j = 0; j < kNumColors; ++j) {
      out += ',';
      out += fmt(r.colors[j]);
    }
    out += ',';
    out += fmt(r.position.x());
    out += ',';
    out += fmt(r.position.y());
    out += ',';
    out += fmt(r.shape.profile_mix);
    out += ',';
    out += fmt(r.shape.scale_arcsec);
    out += ',';
    out += fmt(r.shape.axis_ratio);
    out += ',';
    out += fmt(r.shape.angle_deg);
    out += ',';
    out += fmt(r.sd_ref_flux);
    for (int j = 0; j < kNumColors; ++j) {
      out += ',';
      out += fmt(r.sd_colors[j]);
    }
    out += '\n';
  }
  return out;
}

std::vector<CatalogRow> read_catalog_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("catalog csv: empty input");
  }
  const auto header = split(line, ',');
  auto col = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int c_id = col("id");
  int c_type = col("p_star");
  if (c_type < 0) c_type = col("is_star");
  const int c_flux = col("ref_flux");
  const int c_c1 = col("c1");
  const int c_ra = col("ra"), c_dec = col("dec");
  const int c_mix = col("profile_mix"), c_scale = col("scale");
  const int c_axis = col("axis_ratio"), c_angle = col("angle");
  const int c_sdf = col("sd_ref_flux"), c_sdc1 = col("sd_c1");
  if (c_id < 0 || c_type < 0 || c_flux < 0 || c_c1 < 0 || c_ra < 0 ||
      c_dec < 0 || c_mix < 0 || c_scale < 0 || c_axis < 0 || c_angle < 0) {
    throw std::runtime_error("catalog csv: missing required column");
  }

  std::vector<CatalogRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    auto field = [&](int i) -> double {
      if (i < 0 || i >= static_cast<int>(f.size())) {
        throw std::runtime_error("catalog csv: short row at line " +
                                 std::to_string(lineno));
      }
      return std::stod(f[i]);
    };
    CatalogRow r;
    r.id = static_cast<std::uint64_t>(std::stoull(f[c_id]));
    r.p_star = field(c_type);
    r.ref_flux = field(c_flux);
    for (int j = 0; j < kNumColors; ++j) r.colors[j] = field(c_c1 + j);
    r.position = {field(c_ra), field(c_dec)};
    r.shape.profile_mix = field(c_mix);
    r.shape.scale_arcsec = field(c_scale);
    r.shape.axis_ratio = field(c_axis);
    r.shape.angle_deg = field(c_angle);
    if (c_sdf >= 0 && c_sdf < static_cast<int>(f.size())) {
      r.sd_ref_flux = field(c_sdf);
    }
    if (c_sdc1 >= 0 && c_sdc1 + kNumColors <= static_cast<int>(f.size())) {
      for (int j = 0; j < kNumColors; ++j) r.sd_colors[j] = field(c_sdc1 + j);
    }
    rows.push_back(r);
  }
  return rows;
}

void save_catalog_csv(const std::string& path,
                      const std::vector<CatalogRow>& rows) {
  write_file_atomic(path, write_catalog_csv(rows));
}

std::vector<CatalogRow> load_catalog_csv(const std::string& path) {
  return read_catalog_csv(read_file(path));
}

MatchPairing match_sources(const std::vector<CatalogRow>& pred,
                           const std::vector<CatalogRow>& truth,
                           const ScoreConfig& cfg) {
  struct Cand {
    double dist_px;
    std::size_t p, t;
  };
  std::vector<Cand> cands;
  const double max_arcsec = cfg.max_match_dist_px * cfg.arcsec_per_pixel;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    for (std::size_t t = 0; t < truth.size(); ++t) {
      const double d =
          angular_distance_arcsec(pred[p].position, truth[t].position);
      if (d <= max_arcsec) {
        cands.push_back({d / cfg.arcsec_per_pixel, p, t});
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dist_px != b.dist_px) return a.dist_px < b.dist_px;
    if (a.p != b.p) return a.p < b.p;
    return a.t < b.t;
  });

  MatchPairing out;
  std::vector<bool> p_used(pred.size(), false), t_used(truth.size(), false);
  for (const auto& c : cands) {
    if (p_used[c.p] || t_used[c.t]) continue;
    p_used[c.p] = true;
    t_used[c.t] = true;
    out.pairs.emplace_back(c.p, c.t);
  }
  for (std::size_t p = 0; p < pred.size(); ++p) {
    if (!p_used[p]) out.unmatched_pred.push_back(p);
  }
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (!t_used[t]) out.unmatched_truth.push_back(t);
  }
  return out;
}

ScoreReport score(const std::vector<CatalogRow>& pred,
                  const std::vector<CatalogRow>& truth,
                  const MatchPairing& pairing, const ScoreConfig& cfg) {
  ScoreReport rep;
  rep.matched = pairing.pairs.size();
  rep.unmatched_pred = pairing.unmatched_pred.size();
  rep.unmatched_truth = pairing.unmatched_truth.size();

  double pos_sum = 0.0, bright_sum = 0.0;
  Eigen::Vector4d color_sum = Eigen::Vector4d::Zero();
  double profile_sum = 0.0, ecc_sum = 0.0, scale_sum = 0.0, angle_sum = 0.0;
  std::size_t n_gal_truth = 0, n_star_truth = 0;
  std::size_t missed_gal = 0, missed_star = 0;

  auto magnitude = [&](double flux) {
    return -2.5 * std::log10(flux) + cfg.mag_zero_point;
  };

  for (const auto& [p, t] : pairing.pairs) {
    const CatalogRow& a = pred[p];
    const CatalogRow& b = truth[t];
    pos_sum += angular_distance_arcsec(a.position, b.position) /
               cfg.arcsec_per_pixel;
    bright_sum += std::abs(magnitude(a.ref_flux) - magnitude(b.ref_flux));
    color_sum += (a.colors - b.colors).cwiseAbs();
    if (b.is_star()) {
      ++n_star_truth;
      if (!a.is_star()) ++missed_star;
    } else {
      ++n_gal_truth;
      if (a.is_star()) ++missed_gal;
      profile_sum += std::abs(a.shape.profile_mix - b.shape.profile_mix);
      ecc_sum += std::abs(a.shape.axis_ratio - b.shape.axis_ratio);
      scale_sum += std::abs(a.shape.scale_arcsec - b.shape.scale_arcsec);
      double da = std::abs(a.shape.angle_deg - b.shape.angle_deg);
      da = std::fmod(da, 180.0);
      angle_sum += std::min(da, 180.0 - da);
    }
  }

  const std::size_t n = pairing.pairs.size();
  if (n > 0) {
    rep.position_err_px = pos_sum / n;
    rep.brightness_err_mag = bright_sum / n;
    for (int j = 0; j < kNumColors; ++j) rep.color_errs[j] = color_sum[j] / n;
  }
  if (n_gal_truth > 0) {
    rep.missed_gals = static_cast<double>(missed_gal) / n_gal_truth;
    rep.profile_err = profile_sum / n_gal_truth;
    rep.eccentricity_err = ecc_sum / n_gal_truth;
    rep.scale_err_arcsec = scale_sum / n_gal_truth;
    rep.angle_err_deg = angle_sum / n_gal_truth;
  }
  if (n_star_truth > 0) {
    rep.missed_stars = static_cast<double>(missed_star) / n_star_truth;
  }
  return rep;
}

namespace {

std::string opt_str(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string("");
}

std::string opt_str_table(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

std::string score_report_csv(const ScoreReport& r) {
  std::string out =
      "metric,value\nmatched," + std::to_string(r.matched) +
      "\nunmatched_pred," + std::to_string(r.unmatched_pred) +
      "\nunmatched_truth," + std::to_string(r.unmatched_truth) + "\n";
  out += "position," + opt_str(r.position_err_px) + "\n";
  out += "missed_gals," + opt_str(r.missed_gals) + "\n";
  out += "missed_stars," + opt_str(r.missed_stars) + "\n";
  out += "brightness," + opt_str(r.brightness_err_mag) + "\n";
  for (int j = 0; j < kNumColors; ++j) {
    out += "color_" + std::to_string(j + 1) + "," + opt_str(r.color_errs[j]) +
           "\n";
  }
  out += "profile," + opt_str(r.profile_err) + "\n";
  out += "eccentricity," + opt_str(r.eccentricity_err) + "\n";
  out += "scale," + opt_str(r.scale_err_arcsec) + "\n";
  out += "angle," + opt_str(r.angle_err_deg) + "\n";
  return out;
}

std::string score_report_table(const ScoreReport& r) {
  std::string out;
  out += "matched sources:   " + std::to_string(r.matched) + "\n";
  out += "unmatched pred:    " + std::to_string(r.unmatched_pred) + "\n";
  out += "unmatched truth:   " + std::to_string(r.unmatched_truth) + "\n";
  out += "position (px):     " + opt_str_table(r.position_err_px) + "\n";
  out += "missed gals:       " + opt_str_table(r.missed_gals) + "\n";
  out += "missed stars:      " + opt_str_table(r.missed_stars) + "\n";
  out += "brightness (mag):  " + opt_str_table(r.brightness_err_mag) + "\n";
  for (int j = 0; j < kNumColors; ++j) {
    out += "color c" + std::to_string(j + 1) + ":          " +
           opt_str_table(r.color_errs[j]) + "\n";
  }
  out += "profile:           " + opt_str_table(r.profile_err) + "\n";
  out += "eccentricity:      " + opt_str_table(r.eccentricity_err) + "\n";
  out += "scale (arcsec):    " + opt_str_table(r.scale_err_arcsec) + "\n";
  out += "angle (deg):       " + opt_str_table(r.angle_err_deg) + "\n";
  return out;
}

}  // namespace celeste
