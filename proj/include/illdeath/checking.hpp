#pragma once

#include "illdeath/inference.hpp"
#include "illdeath/model.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace illdeath {

/// Observed proportion next to the fitted probability of the quantity that
/// generates it: incidence 1 - P00, prevalence, mortality, remission P10.
struct CheckRow {
  Outcome outcome = Outcome::Mort;
  int age = 0;
  std::string group;
  std::string gender;
  double y = 0;
  double n = 0;
  double observed = 0;
  double fitted = 0;  // posterior point
  double lo = 0;      // 2.5% posterior quantile
  double hi = 0;      // 97.5% posterior quantile
  double conflict_p = 1;
  bool data_year = false;  // fitted values are data-year values under trends
};

/// One row per observation with n > 0 in the fitted dataset.
std::vector<CheckRow> fitted_vs_observed(const FitResult& fit);
/// The same against another dataset with the fit's group and age structure.
std::vector<CheckRow> fitted_vs_observed(const FitResult& fit, const Dataset& data);

/// Mean of |observed - fitted| over the rows of one outcome.
double mean_abs_discrepancy(const std::vector<CheckRow>& rows, Outcome outcome = Outcome::Mort);

/// Two-sided p-value 2 min(q, 1 - q) where q is the probability that a
/// proportion with posterior Beta(y + 0.5, n - y + 0.5) lies below p_full.
double conflict_pvalue(double y, double n, double p_full);

/// Pareto-smoothed log importance weights for one observation.
struct SmoothedWeights {
  Eigen::VectorXd log_weights;  // unnormalized
  double khat = 0;
};

/// Smooths the largest log ratios using a generalized Pareto fit to the
/// tail. A tail with no spread gets khat = 0 and is left as is.
SmoothedWeights psis_smooth(const Eigen::VectorXd& log_ratios);

struct GpdFit {
  double k = 0;
  double sigma = 0;
};

/// Generalized Pareto fit to positive exceedances by the empirical Bayes
/// method of Zhang and Stephens, with k shrunk toward 0.5.
GpdFit fit_gpd(std::vector<double> exceedances);

inline constexpr double kParetoKThreshold = 0.7;

struct LooKey {
  Outcome outcome = Outcome::Mort;
  int age = 0;
  std::string group;
  std::string gender;
  auto operator<=>(const LooKey&) const = default;
};

struct LooResult {
  std::vector<LooKey> keys;
  Eigen::VectorXd elpd;  // per observation
  Eigen::VectorXd khat;
  Eigen::VectorXd lpd;   // log posterior mean density, without leaving out

  int size() const { return static_cast<int>(elpd.size()); }
  bool flagged(int i) const { return khat(i) > kParetoKThreshold; }
  int n_flagged() const;
  double elpd_total() const { return elpd.sum(); }
  double looic() const { return -2 * elpd_total(); }
  double p_loo() const { return (lpd - elpd).sum(); }
};

/// PSIS-LOO from a draws-by-observations matrix of log-likelihood values.
LooResult psis_loo(const Eigen::MatrixXd& log_lik, std::vector<LooKey> keys);

/// PSIS-LOO for every observation of an MCMC fit with at least 1000 draws.
LooResult psis_loo(const FitResult& fit);

/// Keys for the observations of a model, in observations() order.
std::vector<LooKey> loo_keys(const Model& model);

/// Leave-one-out by refitting with MCMC once per observation. For small
/// datasets; used to check the importance-sampling approximation.
LooResult exact_refit_loo(const Dataset& data, const ModelSpec& spec, const FitOptions& options);

struct LooFilter {
  std::optional<Outcome> outcome;
  std::optional<int> age_min, age_max;

  bool keep(const LooKey& key) const;
};

struct LooComparisonRow {
  std::string label;
  double elpd = 0;
  double looic = 0;
  double diff = 0;     // looic minus that of the first model
  double se_diff = 0;
};

struct LooComparison {
  std::vector<LooComparisonRow> rows;
  int n_used = 0;
  int n_unreliable = 0;  // dropped because some model flagged them
  int n_filtered = 0;    // dropped by the filter
};

/// Compares models on a common set of observations. Observations flagged
/// as unreliable in any model are left out of every model's total.
LooComparison compare_loo(const std::vector<LooResult>& results, const std::vector<std::string>& labels,
                          const LooFilter& filter = {});

}  // namespace illdeath
