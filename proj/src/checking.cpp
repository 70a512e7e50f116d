#include "illdeath/checking.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace illdeath {

namespace {

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double h = (static_cast<double>(sorted.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

const Eigen::VectorXd& probability(const GroupQuantities& q, Outcome o) {
  switch (o) {
    case Outcome::Inc: return q.inc_prob;
    case Outcome::Prev: return q.prev;
    case Outcome::Mort: return q.mort;
    case Outcome::Rem: return q.rem_prob;
  }
  return q.mort;
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

std::vector<CheckRow> fitted_vs_observed(const FitResult& fit) { return fitted_vs_observed(fit, fit.model->data()); }

std::vector<CheckRow> fitted_vs_observed(const FitResult& fit, const Dataset& data) {
  const Model& model = *fit.model;
  const Dataset& own = model.data();
  if (data.groups.size() != own.groups.size() || data.max_age() != own.max_age()) {
    throw std::invalid_argument("fitted_vs_observed: dataset does not match the fitted groups and ages");
  }
  for (std::size_t g = 0; g < own.groups.size(); ++g) {
    if (data.groups[g].area != own.groups[g].area || data.groups[g].gender != own.groups[g].gender) {
      throw std::invalid_argument("fitted_vs_observed: dataset groups are in a different order");
    }
  }

  std::vector<std::vector<GroupQuantities>> per_draw;
  for (Eigen::Index s = 0; s < fit.draws.rows(); ++s) {
    try {
      per_draw.push_back(model.quantities(fit.draws.row(s).transpose()));
    } catch (const std::exception&) {
    }
  }
  const std::vector<GroupQuantities> at_mode =
      fit.method == Method::Opt ? model.quantities(fit.mode) : std::vector<GroupQuantities>{};

  std::vector<CheckRow> rows;
  std::vector<double> values;
  for (Outcome o : kOutcomes) {
    for (std::size_t g = 0; g < data.groups.size(); ++g) {
      const auto& counts = data.groups[g].counts;
      if (!counts.has(o)) continue;
      const auto& series = counts.get(o);
      for (int a = 0; a <= counts.max_age; ++a) {
        if (!(series.n(a) > 0)) continue;
        CheckRow row;
        row.outcome = o;
        row.age = a;
        row.group = own.area_names[data.groups[g].area];
        row.gender = own.gender_names[data.groups[g].gender];
        row.y = series.y(a);
        row.n = series.n(a);
        row.observed = row.y / row.n;
        row.data_year = model.spec().has_trends();
        values.clear();
        for (const auto& q : per_draw) {
          const double p = probability(q[g], o)(a);
          if (std::isfinite(p)) values.push_back(p);
        }
        std::sort(values.begin(), values.end());
        const double nan = std::numeric_limits<double>::quiet_NaN();
        if (fit.method == Method::Opt) {
          row.fitted = probability(at_mode[g], o)(a);
        } else {
          row.fitted = values.empty() ? nan : quantile_sorted(values, 0.5);
        }
        row.lo = values.empty() ? nan : std::min(row.fitted, quantile_sorted(values, 0.025));
        row.hi = values.empty() ? nan : std::max(row.fitted, quantile_sorted(values, 0.975));
        const double p_full = std::clamp(row.fitted, kProbFloor, 1 - kProbFloor);
        row.conflict_p = std::isfinite(p_full) ? conflict_pvalue(row.y, row.n, p_full) : nan;
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

double mean_abs_discrepancy(const std::vector<CheckRow>& rows, Outcome outcome) {
  double sum = 0;
  int count = 0;
  for (const auto& r : rows) {
    if (r.outcome != outcome) continue;
    sum += std::abs(r.observed - r.fitted);
    ++count;
  }
  return count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

double conflict_pvalue(double y, double n, double p_full) {
  if (!(n > 0 && y >= 0 && y <= n)) throw std::invalid_argument("conflict_pvalue: need 0 <= y <= n and n > 0");
  if (!(p_full > 0 && p_full < 1)) throw std::invalid_argument("conflict_pvalue: p_full must lie in (0, 1)");
  const double a = y + 0.5, b = n - y + 0.5;
  const double q = boost::math::ibeta(a, b, p_full);
  const double upper = boost::math::ibetac(a, b, p_full);
  const double p = std::min(1.0, 2 * std::min(q, upper));
  return std::max(p, std::numeric_limits<double>::min());
}

GpdFit fit_gpd(std::vector<double> x) {
  if (x.empty()) throw std::invalid_argument("fit_gpd: no exceedances");
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  const int m = 30 + static_cast<int>(std::floor(std::sqrt(n)));
  double xstar = x[static_cast<std::size_t>(std::floor(n / 4 + 0.5)) - 1];
  if (!(xstar > 0)) xstar = *std::upper_bound(x.begin(), x.end(), 0.0);
  constexpr double kPriorScale = 3;
  Eigen::VectorXd theta(m), loglik(m);
  for (int j = 0; j < m; ++j) {
    theta(j) = 1 / x.back() + (1 - std::sqrt(m / (j + 0.5))) / (kPriorScale * xstar);
    double k = 0;
    for (double v : x) k += std::log1p(-theta(j) * v);
    k /= n;
    loglik(j) = n * (std::log(-theta(j) / k) - k - 1);
    if (!std::isfinite(loglik(j))) loglik(j) = -std::numeric_limits<double>::infinity();
  }
  const Eigen::VectorXd w = (loglik.array() - log_sum_exp(loglik)).exp();
  const double theta_hat = theta.dot(w);
  double k = 0;
  for (double v : x) k += std::log1p(-theta_hat * v);
  k /= n;
  const double sigma = -k / theta_hat;
  // Weakly informative prior: ten pseudo-observations at k = 0.5.
  constexpr double kPriorCount = 10;
  return {(n * k + kPriorCount * 0.5) / (n + kPriorCount), sigma};
}

SmoothedWeights psis_smooth(const Eigen::VectorXd& log_ratios) {
  const Eigen::Index s = log_ratios.size();
  if (s < 2) throw std::invalid_argument("psis_smooth: need at least two draws");
  const double top = log_ratios.maxCoeff();
  SmoothedWeights out{log_ratios.array() - top, 0.0};
  const auto tail_len = static_cast<Eigen::Index>(
      std::ceil(std::min(0.2 * static_cast<double>(s), 3 * std::sqrt(static_cast<double>(s)))));
  if (tail_len < 5 || tail_len >= s) return out;

  std::vector<Eigen::Index> order(s);
  for (Eigen::Index i = 0; i < s; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return out.log_weights(a) < out.log_weights(b); });
  const double cutoff = out.log_weights(order[s - tail_len - 1]);
  if (!(0 > cutoff)) return out;  // the tail has no spread

  const double exp_cutoff = std::exp(cutoff);
  std::vector<double> exceed(tail_len);
  for (Eigen::Index j = 0; j < tail_len; ++j) {
    exceed[j] = std::exp(out.log_weights(order[s - tail_len + j])) - exp_cutoff;
  }
  const GpdFit gpd = fit_gpd(exceed);
  out.khat = gpd.k;
  if (!std::isfinite(gpd.k)) return out;
  for (Eigen::Index j = 0; j < tail_len; ++j) {
    const double p = (static_cast<double>(j) + 0.5) / static_cast<double>(tail_len);
    const double q = std::abs(gpd.k) < 1e-12 ? -gpd.sigma * std::log1p(-p)
                                              : gpd.sigma * std::expm1(-gpd.k * std::log1p(-p)) / gpd.k;
    out.log_weights(order[s - tail_len + j]) = std::min(0.0, std::log(q + exp_cutoff));
  }
  return out;
}

int LooResult::n_flagged() const {
  int count = 0;
  for (int i = 0; i < size(); ++i) count += flagged(i);
  return count;
}

LooResult psis_loo(const Eigen::MatrixXd& log_lik, std::vector<LooKey> keys) {
  if (static_cast<Eigen::Index>(keys.size()) != log_lik.cols()) {
    throw std::invalid_argument("psis_loo: one key per observation required");
  }
  const Eigen::Index s = log_lik.rows();
  LooResult out;
  out.keys = std::move(keys);
  out.elpd.resize(log_lik.cols());
  out.khat.resize(log_lik.cols());
  out.lpd.resize(log_lik.cols());
  for (Eigen::Index i = 0; i < log_lik.cols(); ++i) {
    const Eigen::VectorXd ll = log_lik.col(i);
    const SmoothedWeights w = psis_smooth(-ll);
    out.elpd(i) = log_sum_exp(w.log_weights + ll) - log_sum_exp(w.log_weights);
    out.khat(i) = w.khat;
    out.lpd(i) = log_sum_exp(ll) - std::log(static_cast<double>(s));
  }
  return out;
}

std::vector<LooKey> loo_keys(const Model& model) {
  const Dataset& d = model.data();
  std::vector<LooKey> keys;
  for (const auto& k : model.observations()) {
    const auto& g = d.groups[k.group];
    keys.push_back({k.outcome, k.age, d.area_names[g.area], d.gender_names[g.gender]});
  }
  return keys;
}

LooResult psis_loo(const FitResult& fit) {
  if (fit.method != Method::Mcmc) throw std::invalid_argument("psis_loo: requires an MCMC fit");
  if (fit.draws.rows() < 1000) {
    throw std::invalid_argument(fmt::format("psis_loo: {} draws, at least 1000 required", fit.draws.rows()));
  }
  const Model& model = *fit.model;
  Eigen::MatrixXd log_lik(fit.draws.rows(), model.observations().size());
  for (Eigen::Index s = 0; s < fit.draws.rows(); ++s) {
    log_lik.row(s) = model.pointwise_log_likelihood(fit.draws.row(s).transpose()).transpose();
  }
  return psis_loo(log_lik, loo_keys(model));
}

LooResult exact_refit_loo(const Dataset& data, const ModelSpec& spec, const FitOptions& options) {
  const Model full(data, spec);
  LooResult out;
  out.keys = loo_keys(full);
  const auto n_obs = static_cast<Eigen::Index>(full.observations().size());
  out.elpd.resize(n_obs);
  out.khat = Eigen::VectorXd::Zero(n_obs);
  out.lpd = Eigen::VectorXd::Constant(n_obs, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < n_obs; ++i) {
    const ObservationKey key = full.observations()[i];
    Dataset reduced = data;
    auto& series = *reduced.groups[key.group].counts.series[static_cast<int>(key.outcome)];
    series.y(key.age) = 0;
    series.n(key.age) = 0;
    const FitResult fit = fit_mcmc(reduced, spec, options);
    if (fit.model->dim() != full.dim()) throw std::logic_error("exact_refit_loo: parameter layouts differ");
    Eigen::VectorXd ll(fit.draws.rows());
    for (Eigen::Index s = 0; s < fit.draws.rows(); ++s) {
      ll(s) = full.pointwise_log_likelihood(fit.draws.row(s).transpose())(i);
    }
    out.elpd(i) = log_sum_exp(ll) - std::log(static_cast<double>(ll.size()));
  }
  return out;
}

bool LooFilter::keep(const LooKey& key) const {
  if (outcome && key.outcome != *outcome) return false;
  if (age_min && key.age < *age_min) return false;
  if (age_max && key.age > *age_max) return false;
  return true;
}

LooComparison compare_loo(const std::vector<LooResult>& results, const std::vector<std::string>& labels,
                          const LooFilter& filter) {
  if (results.empty() || results.size() != labels.size()) {
    throw std::invalid_argument("compare_loo: one label per result required");
  }
  std::vector<std::map<LooKey, int>> index(results.size());
  for (std::size_t m = 0; m < results.size(); ++m) {
    for (int i = 0; i < results[m].size(); ++i) index[m][results[m].keys[i]] = i;
    if (index[m].size() != results[m].keys.size()) throw std::invalid_argument("compare_loo: duplicate observation keys");
  }
  for (std::size_t m = 1; m < results.size(); ++m) {
    const bool same = index[m].size() == index[0].size() &&
                      std::equal(index[m].begin(), index[m].end(), index[0].begin(),
                                 [](const auto& a, const auto& b) { return a.first == b.first; });
    if (!same) {
      throw std::invalid_argument(fmt::format("compare_loo: '{}' and '{}' have different observations", labels[0], labels[m]));
    }
  }

  LooComparison out;
  std::vector<LooKey> used;
  for (const auto& [key, i0] : index[0]) {
    if (!filter.keep(key)) {
      ++out.n_filtered;
      continue;
    }
    bool reliable = true;
    for (std::size_t m = 0; m < results.size(); ++m) reliable = reliable && !results[m].flagged(index[m].at(key));
    if (reliable) used.push_back(key);
    else ++out.n_unreliable;
  }
  out.n_used = static_cast<int>(used.size());
  auto pointwise = [&](std::size_t m) {
    Eigen::VectorXd e(used.size());
    for (std::size_t j = 0; j < used.size(); ++j) e(j) = results[m].elpd(index[m].at(used[j]));
    return e;
  };
  const Eigen::VectorXd base = pointwise(0);
  for (std::size_t m = 0; m < results.size(); ++m) {
    const Eigen::VectorXd e = pointwise(m);
    LooComparisonRow row;
    row.label = labels[m];
    row.elpd = e.sum();
    row.looic = -2 * row.elpd;
    const Eigen::ArrayXd d = 2 * (base - e).array();
    row.diff = d.sum();
    const double n = static_cast<double>(d.size());
    row.se_diff = n > 1 ? std::sqrt(n * (d - d.mean()).square().sum() / (n - 1)) : 0.0;
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace illdeath
