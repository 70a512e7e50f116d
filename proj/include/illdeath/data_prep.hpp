#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace illdeath {

/// A published probability estimate with its 95% interval.
struct PointInterval {
  double est = 0;
  double lo = 0;
  double hi = 0;
};

/// Fractional numerator and denominator carrying the information of an estimate.
struct EffectiveCounts {
  double y = 0;
  double n = 0;
};

struct BetaFit {
  double alpha = 0;
  double beta = 0;
  double objective = 0;  // sum of squared CDF errors at lo, est, hi
};

class BetaFitError : public std::runtime_error {
 public:
  BetaFitError(const std::string& what, double objective) : std::runtime_error(what), objective(objective) {}
  double objective;
};

/// Beta(alpha, beta) whose 2.5%, 50% and 97.5% points best match the interval,
/// searched on (log alpha, log beta) with both parameters capped at 1e6.
/// Throws BetaFitError when the best objective exceeds `max_objective`.
BetaFit fit_beta_quantiles(const PointInterval& pi, double max_objective = 1e-3);

/// y = alpha and n = alpha + beta of the best-fitting beta distribution.
EffectiveCounts beta_from_quantiles(const PointInterval& pi, double max_objective = 1e-3);

/// y = est * denom, n = denom.
EffectiveCounts counts_from_estimate(double est, double denom);

/// Counts published for the ages age_lo..age_hi inclusive.
struct AgeGroupCounts {
  int age_lo = 0;
  int age_hi = 0;
  double y = 0;
  double n = 0;
};

struct YearlyCounts {
  int age_start = 0;
  Eigen::VectorXd y;
  Eigen::VectorXd n;
};

/// Smoothest yearly series with the given sums over contiguous age groups:
/// minimizes squared second differences plus a tiny first-difference ridge.
/// Negative values are set to zero and the rest of their group rescaled.
Eigen::VectorXd disaggregate_series(const std::vector<int>& widths, const Eigen::VectorXd& totals);

/// Disaggregates numerators and denominators separately. Where a yearly
/// numerator would exceed its denominator, the group's numerators are reset
/// to the group proportion times the yearly denominators.
YearlyCounts disaggregate(const std::vector<AgeGroupCounts>& groups);

struct RemissionEstimate {
  double probability = 0;  // annual
  double rate = 0;
};

/// Inverts S = 1 - (1 - r)^10 for the annual remission probability r.
RemissionEstimate remission_from_survival(double survival10);

/// Multiplies both counts by a weight in (0, 1].
EffectiveCounts downweight(double y, double n, double weight);

}  // namespace illdeath
