#include "celeste/priors_fit.hpp"

#include <cmath>
#include <stdexcept>

namespace celeste {

namespace {

constexpr double kPStarClamp = 1e-6;
constexpr double kVarFloor = 1e-8;

struct Moments {
  std::size_t n = 0;
  double sum = 0.0;
  double sumsq = 0.0;

  void add(double x) {
    ++n;
    sum += x;
    sumsq += x * x;
  }
  double mean() const { return sum / n; }
  // usable unbiased variance: needs >= 2 entries and a non-degenerate spread
  bool has_variance() const { return n >= 2 && variance() > kVarFloor; }
  double variance() const {
    const double m = mean();
    return n >= 2 ? (sumsq - n * m * m) / (n - 1) : 0.0;
  }
};

}  // namespace

PriorFit fit_priors(const std::vector<CatalogRow>& catalog) {
  if (catalog.empty()) {
    throw std::domain_error("fit_priors: empty catalog");
  }
  PriorFit out;

  std::size_t n_star = 0;
  Moments log_flux[2];           // [star, galaxy]
  Moments colors[2][kNumColors];
  for (const auto& row : catalog) {
    const int t = row.is_star() ? 0 : 1;
    if (row.is_star()) ++n_star;
    if (!(row.ref_flux > 0.0)) {
      throw std::domain_error("fit_priors: non-positive flux in catalog");
    }
    log_flux[t].add(std::log(row.ref_flux));
    for (int j = 0; j < kNumColors; ++j) colors[t][j].add(row.colors[j]);
  }

  const double frac = static_cast<double>(n_star) / catalog.size();
  out.prior.p_star = std::clamp(frac, kPStarClamp, 1.0 - kPStarClamp);
  if (frac != out.prior.p_star) {
    out.warnings.push_back("p_star clamped away from the boundary");
  }

  TypePrior* types[2] = {&out.prior.star, &out.prior.galaxy};
  const char* names[2] = {"star", "galaxy"};
  for (int t = 0; t < 2; ++t) {
    TypePrior defaults;  // documented fallbacks
    TypePrior& tp = *types[t];
    if (log_flux[t].n >= 1) {
      tp.log_flux_mean = log_flux[t].mean();
      for (int j = 0; j < kNumColors; ++j) {
        tp.color_mean[j] = colors[t][j].mean();
      }
    } else {
      tp = defaults;
      out.warnings.push_back(std::string(names[t]) +
                             ": no entries, prior left at defaults");
      continue;
    }
    if (log_flux[t].has_variance()) {
      tp.log_flux_var = log_flux[t].variance();
    } else {
      tp.log_flux_var = defaults.log_flux_var;
      out.warnings.push_back(std::string(names[t]) +
                             ": degenerate log-flux variance, using default");
    }
    for (int j = 0; j < kNumColors; ++j) {
      if (colors[t][j].has_variance()) {
        tp.color_var[j] = colors[t][j].variance();
      } else {
        tp.color_var[j] = defaults.color_var[j];
        out.warnings.push_back(std::string(names[t]) + ": color " +
                               std::to_string(j + 1) +
                               " variance degenerate, using default");
      }
    }
  }
  out.prior.validate();
  return out;
}

}  // namespace celeste
