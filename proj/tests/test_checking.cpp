#include "illdeath/checking.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace illdeath;
using namespace illdeath::testing;

namespace {

/// Beta CDF by composite Simpson integration of the density.
double beta_cdf_simpson(double a, double b, double x, int intervals = 20000) {
  const double log_norm = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
  auto f = [&](double t) {
    if (t <= 0) return 0.0;
    return std::exp(log_norm + (a - 1) * std::log(t) + (b - 1) * std::log1p(-t));
  };
  const double h = x / intervals;
  double sum = f(0) + f(x);
  for (int i = 1; i < intervals; ++i) sum += (i % 2 ? 4 : 2) * f(i * h);
  return sum * h / 3;
}

double log_beta_fn(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

double log_choose(double n, double k) { return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1); }

/// Common success probability with a uniform prior: exact posterior draws,
/// the log-likelihood matrix, and exact leave-one-out predictive densities.
struct BetaBinomialToy {
  std::vector<double> y, n;

  std::vector<LooKey> keys() const {
    std::vector<LooKey> k;
    for (std::size_t i = 0; i < y.size(); ++i) k.push_back({Outcome::Mort, static_cast<int>(i), "all", ""});
    return k;
  }

  Eigen::MatrixXd log_lik(int draws, std::uint64_t seed) const {
    double a = 1, b = 1;
    for (std::size_t i = 0; i < y.size(); ++i) a += y[i], b += n[i] - y[i];
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> ga(a), gb(b);
    Eigen::MatrixXd ll(draws, y.size());
    for (int s = 0; s < draws; ++s) {
      const double u = ga(rng), v = gb(rng);
      const double p = u / (u + v);
      for (std::size_t i = 0; i < y.size(); ++i) ll(s, i) = binomial_logpdf(y[i], n[i], p);
    }
    return ll;
  }

  double exact_loo(std::size_t i) const {
    double a = 1, b = 1;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (j != i) a += y[j], b += n[j] - y[j];
    }
    return log_choose(n[i], y[i]) + log_beta_fn(a + y[i], b + n[i] - y[i]) - log_beta_fn(a, b);
  }
};

BetaBinomialToy toy(int count, std::uint64_t seed) {
  BetaBinomialToy t;
  std::mt19937_64 rng(seed);
  std::binomial_distribution<int> draw(40, 0.3);
  for (int i = 0; i < count; ++i) {
    t.n.push_back(40);
    t.y.push_back(draw(rng));
  }
  return t;
}

}  // namespace

TEST_CASE("conflict p-values") {
  CHECK(conflict_pvalue(5, 10, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(conflict_pvalue(0, 100, 0.5) < 1e-20);
  CHECK(conflict_pvalue(0, 100, 0.5) > 0);
  const double q = beta_cdf_simpson(30.5, 70.5, 0.25);
  CHECK(conflict_pvalue(30, 100, 0.25) == doctest::Approx(2 * std::min(q, 1 - q)).epsilon(1e-8));
  CHECK_THROWS_AS(conflict_pvalue(11, 10, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(conflict_pvalue(1, 0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(conflict_pvalue(1, 10, 1.0), std::invalid_argument);
}

TEST_CASE("generalized Pareto fit") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (double k : {0.2, 0.5, 0.9}) {
    std::vector<double> x(20000);
    for (auto& v : x) v = 2.0 * (std::pow(1 - u(rng), -k) - 1) / k;
    const GpdFit fit = fit_gpd(x);
    CHECK(fit.k == doctest::Approx(k).epsilon(0.1));
    CHECK(fit.sigma == doctest::Approx(2.0).epsilon(0.1));
  }
}

TEST_CASE("Pareto smoothing") {
  SUBCASE("equal ratios") {
    const auto w = psis_smooth(Eigen::VectorXd::Constant(1000, 3.0));
    CHECK(w.khat <= 0);
    CHECK(w.log_weights.cwiseAbs().maxCoeff() == 0);
  }
  SUBCASE("smoothed weights never exceed the largest raw ratio") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z;
    Eigen::VectorXd r(2000);
    for (auto& v : r) v = 2 * z(rng);
    const auto w = psis_smooth(r);
    CHECK(w.log_weights.maxCoeff() <= 0);
    CHECK(std::isfinite(w.khat));
  }
}

TEST_CASE("PSIS-LOO against exact leave-one-out") {
  const BetaBinomialToy t = toy(20, 3);
  const LooResult loo = psis_loo(t.log_lik(4000, 4), t.keys());
  for (std::size_t i = 0; i < t.y.size(); ++i) {
    CHECK(std::abs(loo.elpd(i) - t.exact_loo(i)) < 0.02);
    CHECK(loo.khat(i) < kParetoKThreshold);
  }
  CHECK(loo.looic() == doctest::Approx(-2 * loo.elpd.sum()));
  CHECK(loo.p_loo() > 0);
  CHECK(loo.n_flagged() == 0);
}

TEST_CASE("duplicated observations get equal elpd") {
  BetaBinomialToy t = toy(10, 5);
  const auto y = t.y, n = t.n;
  t.y.insert(t.y.end(), y.begin(), y.end());
  t.n.insert(t.n.end(), n.begin(), n.end());
  const LooResult loo = psis_loo(t.log_lik(4000, 6), t.keys());
  for (int i = 0; i < 10; ++i) CHECK(loo.elpd(i) == doctest::Approx(loo.elpd(i + 10)).epsilon(1e-12));
}

TEST_CASE("an influential outlier is flagged") {
  BetaBinomialToy t = toy(20, 7);
  t.y.push_back(500);
  t.n.push_back(500);
  const LooResult loo = psis_loo(t.log_lik(4000, 8), t.keys());
  CHECK(loo.khat(20) > kParetoKThreshold);
  CHECK(loo.flagged(20));
}

TEST_CASE("comparing LOO results") {
  const BetaBinomialToy t = toy(30, 9);
  const LooResult a = psis_loo(t.log_lik(2000, 1), t.keys());
  SUBCASE("a model against itself") {
    const auto cmp = compare_loo({a, a}, {"m1", "m1 again"});
    CHECK(cmp.rows[1].diff == 0);
    CHECK(cmp.n_used == 30);
    CHECK(cmp.rows[0].looic == doctest::Approx(a.looic()));
  }
  SUBCASE("filtering by age") {
    LooFilter f;
    f.outcome = Outcome::Mort;
    f.age_min = 10;
    f.age_max = 19;
    const auto cmp = compare_loo({a}, {"m1"}, f);
    CHECK(cmp.n_used == 10);
    CHECK(cmp.n_filtered == 20);
  }
  SUBCASE("unreliable observations are dropped from every model") {
    LooResult b = a;
    b.khat(4) = 0.9;
    const auto cmp = compare_loo({a, b}, {"m1", "m2"});
    CHECK(cmp.n_used == 29);
    CHECK(cmp.n_unreliable == 1);
  }
  SUBCASE("mismatched observations") {
    LooResult b = a;
    b.keys[0].age = 99;
    CHECK_THROWS_AS(compare_loo({a, b}, {"m1", "m2"}), std::invalid_argument);
  }
}

TEST_CASE("fitted against observed") {
  ModelSpec spec;
  spec.cf = {CurveFamily::Indep, 0};
  spec.inc = {CurveFamily::Indep, 0};
  auto rates = smooth_truth(40);
  for (auto& r : rates) r.inc *= 20, r.cf *= 5;
  Dataset d = single_group(expected_counts(rates, 1e4, {Outcome::Inc, Outcome::Prev, Outcome::Mort}));
  auto& mort = *d.groups[0].counts.series[static_cast<int>(Outcome::Mort)];
  mort.y(7) = 0;
  mort.n(7) = 0;
  FitOptions opt;
  opt.laplace_draws = 200;
  const FitResult fit = fit_mode(d, spec, opt);
  const auto rows = fitted_vs_observed(fit);
  CHECK(rows.size() == 3u * 41u - 1u);
  for (const auto& r : rows) {
    CHECK(std::abs(r.observed - r.fitted) < 0.01);
    CHECK(r.lo <= r.fitted);
    CHECK(r.fitted <= r.hi);
    CHECK(!(r.outcome == Outcome::Mort && r.age == 7));
    CHECK_FALSE(r.data_year);
  }
  CHECK(mean_abs_discrepancy(rows) < 0.01);
  Dataset other = d;
  other.groups.push_back(other.groups[0]);
  CHECK_THROWS_AS(fitted_vs_observed(fit, other), std::invalid_argument);
  CHECK_THROWS_AS(psis_loo(fit), std::invalid_argument);
}

TEST_CASE("exact refit LOO on a tiny model") {
  ModelSpec spec;
  spec.cf = {CurveFamily::Constant, 0};
  spec.inc = {CurveFamily::Constant, 0};
  const Dataset d = single_group(expected_counts(std::vector<R>(4, R{0.05, 0.1, 0}), 300, {Outcome::Prev, Outcome::Mort}));
  FitOptions opt;
  opt.chains = 2;
  opt.warmup = 200;
  opt.iterations = 250;
  const LooResult exact = exact_refit_loo(d, spec, opt);
  CHECK(exact.size() == 8);
  CHECK(exact.elpd.allFinite());
  CHECK(exact.elpd.maxCoeff() < 0);
}
