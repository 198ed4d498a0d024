#pragma once

#include <string>
#include <vector>

#include "celeste/validate.hpp"

namespace celeste {

/// Result of estimating prior parameters from an existing catalog, with
/// warnings for any field that fell back to its documented default.
struct PriorFit {
  Prior prior;
  std::vector<std::string> warnings;
};

/// Moment estimators from catalog rows: p_star is the star fraction
/// (clamped inside (0,1) so the Bernoulli KL stays finite), per-type
/// log-flux and color moments use unbiased sample variances. Types with
/// fewer than two rows keep default variances and emit a warning.
PriorFit fit_priors(const std::vector<CatalogRow>& catalog);

}  // namespace celeste
