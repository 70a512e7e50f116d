#include "illdeath/inference.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace illdeath;
using namespace illdeath::testing;

namespace {

Dataset noise_free(int max_age, double denom) {
  return single_group(expected_counts(smooth_truth(max_age), denom, {Outcome::Inc, Outcome::Prev, Outcome::Mort}));
}

double mare(const Eigen::VectorXd& fitted, const std::vector<R>& truth, double R::*field, int from, int to) {
  double sum = 0;
  for (int a = from; a <= to; ++a) sum += std::abs(fitted(a) / (truth[a].*field) - 1);
  return sum / (to - from + 1);
}

}  // namespace

TEST_CASE("prior-only fit returns the prior means") {
  Dataset d = noise_free(30, 100);
  for (auto& s : d.groups[0].counts.series) {
    if (s) s->y.setZero(), s->n.setZero();
  }
  ModelSpec spec;
  spec.hp_fixed = {{"lambda_cf", 1.0}, {"lambda_inc", 1.0}};
  FitOptions opt;
  opt.laplace_draws = 10;
  const FitResult fit = fit_mode(d, spec, opt);
  CHECK(fit.mode.cwiseAbs().maxCoeff() < 1e-6);
  CHECK(fit.diagnostics.converged);
  // The Laplace covariance of a quadratic log density is exact.
  CHECK(fit.covariance(0, 0) == doctest::Approx(100.0 * 100.0).epsilon(1e-4));
}

TEST_CASE("posterior mode recovers smooth rates from noise-free counts") {
  const auto truth = smooth_truth(100);
  const FitResult fit = fit_mode(noise_free(100, 1e5), ModelSpec{});
  CHECK(fit.diagnostics.converged);
  CHECK(fit.diagnostics.gradient_norm < 1e-5 * (1 + std::abs(fit.diagnostics.log_posterior)));
  const auto q = fit.model->quantities(fit.mode)[0];
  CHECK(mare(q.cf, truth, &R::cf, 40, 90) < 0.10);
  CHECK(mare(q.inc, truth, &R::inc, 40, 90) < 0.05);
}

TEST_CASE("fits are deterministic") {
  FitOptions opt;
  opt.laplace_draws = 200;
  opt.seed = 9;
  const Dataset d = noise_free(60, 1e4);
  const auto a = tidy(fit_mode(d, ModelSpec{}, opt));
  const auto b = tidy(fit_mode(d, ModelSpec{}, opt));
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(a.rows[k].point == b.rows[k].point);
    CHECK(a.rows[k].q == b.rows[k].q);
  }
}

TEST_CASE("tidy tables") {
  FitOptions opt;
  opt.laplace_draws = 200;
  const FitResult fit = fit_mode(noise_free(80, 1e4), ModelSpec{}, opt);
  SUBCASE("row count covers variables, ages and groups") {
    CHECK(tidy(fit).rows.size() == 6u * 81u);
  }
  SUBCASE("case fatality at ages 61 to 65") {
    TidyOptions t;
    t.vars = {"cf"};
    t.age_min = 61;
    t.age_max = 65;
    const auto table = tidy(fit, t);
    REQUIRE(table.rows.size() == 5);
    CHECK(table.quantile_columns() == std::vector<std::string>{"lo", "hi"});
    for (int k = 0; k < 5; ++k) {
      const auto& r = table.rows[k];
      CHECK(r.age == 61 + k);
      CHECK(r.var == "cf");
      CHECK(r.q[0] <= r.point);
      CHECK(r.point <= r.q[1]);
    }
  }
  SUBCASE("a lone median has no interval columns") {
    TidyOptions t;
    t.quantiles = {0.5};
    const auto table = tidy(fit, t);
    CHECK(table.quantile_columns() == std::vector<std::string>{"q50"});
  }
  SUBCASE("unknown variable") {
    TidyOptions t;
    t.vars = {"survival"};
    CHECK_THROWS_AS(tidy(fit, t), std::invalid_argument);
  }
}

TEST_CASE("fixing hyperparameters") {
  const Dataset d = noise_free(60, 1e4);
  FitOptions opt;
  opt.laplace_draws = 10;
  opt.optim.gradient_tolerance = 1e-9;
  const FitResult full = fit_mode(d, ModelSpec{}, opt);
  const ModelSpec pinned = fix_hyperparameters(ModelSpec{}, full, {"lambda_cf"});
  CHECK(pinned.hp_fixed.at("lambda_cf") == doctest::Approx(std::exp(full.mode(full.model->layout().block("cf_log_lambda").offset))));
  const FitResult refit = fit_mode(d, pinned, opt);
  CHECK(refit.model->dim() == full.model->dim() - 1);
  // Profile consistency: the other coordinates of the mode do not move.
  for (const auto& b : refit.model->layout().blocks()) {
    const auto& fb = full.model->layout().block(b.name);
    for (int j = 0; j < b.size; ++j) CHECK(std::abs(refit.mode(b.offset + j) - full.mode(fb.offset + j)) < 1e-4);
  }
  CHECK_THROWS_AS(fix_hyperparameters(ModelSpec{}, full, {"cf_beta"}), std::invalid_argument);
  CHECK_THROWS_AS(fix_hyperparameters(ModelSpec{}, full, {"lambda_rem"}), std::invalid_argument);
}

TEST_CASE("group order does not change the mode") {
  Dataset d;
  d.area_names = {"a", "b", "c"};
  for (int i = 0; i < 3; ++i) {
    auto rates = smooth_truth(50);
    for (auto& r : rates) r.cf *= 1 + 0.3 * i;
    d.groups.push_back(GroupData{i, 0, expected_counts(rates, 5e3, {Outcome::Inc, Outcome::Prev, Outcome::Mort})});
  }
  Dataset permuted = d;
  std::swap(permuted.groups[0], permuted.groups[2]);
  ModelSpec spec;
  spec.hierarchical = true;
  FitOptions opt;
  opt.laplace_draws = 0;
  opt.optim.gradient_tolerance = 1e-12;
  const FitResult a = fit_mode(d, spec, opt);
  const FitResult b = fit_mode(permuted, spec, opt);
  // Incidence curves are per group, so compare block by block.
  for (const auto& blk : a.model->layout().blocks()) {
    if (blk.name == "inc_beta") {
      const int k = spec.basis_dim;
      CHECK((a.mode.segment(blk.offset, k) - b.mode.segment(blk.offset + 2 * k, k)).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((a.mode.segment(blk.offset + k, k) - b.mode.segment(blk.offset + k, k)).cwiseAbs().maxCoeff() < 1e-8);
    } else {
      CHECK((a.mode.segment(blk.offset, blk.size) - b.mode.segment(blk.offset, blk.size)).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("an unidentified direction is reported, not regularized") {
  Dataset d = noise_free(30, 100);
  for (auto& s : d.groups[0].counts.series) {
    if (s) s->y.setZero(), s->n.setZero();
  }
  ModelSpec spec;
  spec.prior.intercept_sd = 1e5;  // prior precision 1e-10 and no data
  try {
    fit_mode(d, spec);
    FAIL("expected NonIdentifiableError");
  } catch (const NonIdentifiableError& e) {
    CHECK(e.eigenvalue < 1e-8);
    CHECK(e.parameter.find("_beta[0]") != std::string::npos);
    CHECK(std::string(e.what()).find("hp_fixed") != std::string::npos);
  }
}

TEST_CASE("MCMC fit on a small model") {
  ModelSpec spec;
  spec.cf = {CurveFamily::Constant, 0};
  spec.inc = {CurveFamily::Constant, 0};
  const Dataset d = single_group(expected_counts(std::vector<R>(10, R{0.05, 0.1, 0}), 500, {Outcome::Prev, Outcome::Mort}));
  FitOptions opt;
  opt.chains = 2;
  opt.warmup = 300;
  opt.iterations = 300;
  const FitResult fit = fit_mcmc(d, spec, opt);
  CHECK(fit.draws.rows() == 600);
  CHECK(fit.diagnostics.rhat.size() == 2);
  CHECK(fit.diagnostics.rhat.maxCoeff() < 1.05);
  CHECK(fit.diagnostics.converged);
  const Eigen::VectorXd med = fit.point();
  CHECK(std::abs(med(fit.model->layout().block("cf_lograte").offset) - std::log(0.1)) < 0.3);
  opt.chains = 1;
  CHECK_THROWS_AS(fit_mcmc(d, spec, opt), std::invalid_argument);
}
