#include "illdeath/disease_process.hpp"

#include <doctest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <array>
#include <cmath>
#include <random>
#include <vector>

using namespace illdeath;
using R = RateTriple<double>;

namespace {

double max_abs_diff(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("transition matrix: no rates gives the identity") {
  CHECK(transition_matrix(R{0, 0, 0}) == Eigen::Matrix3d::Identity());
}

TEST_CASE("transition matrix: incidence only") {
  const auto p = transition_matrix(R{0.05, 0, 0});
  CHECK(p(0, 0) == doctest::Approx(std::exp(-0.05)).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(1 - std::exp(-0.05)).epsilon(1e-12));
  CHECK(std::abs(p(0, 2)) < 1e-15);
  CHECK(p(0, 0) == doctest::Approx(0.951229).epsilon(1e-6));
}

TEST_CASE("transition matrix matches the series oracle") {
  for (const R& rates : {R{0.1, 0.2, 0.05}, R{0.1, 0.1, 0.0}, R{2.0, 0.3, 4.0}, R{1e-6, 0, 0}}) {
    CHECK(max_abs_diff(transition_matrix(rates), expm_oracle(rates, 1.0)) < 1e-8);
  }
}

TEST_CASE("series oracle agrees with Eigen's matrix exponential") {
  for (const R& rates : {R{0.1, 0.2, 0.05}, R{5, 5, 5}, R{0.5, 0.01, 1}}) {
    const Eigen::Matrix3d q = intensity_matrix(rates);
    const Eigen::Matrix3d ref = q.exp();
    CHECK(max_abs_diff(expm_oracle(rates, 1.0), ref) < 1e-12);
  }
}

TEST_CASE("series oracle edge cases") {
  CHECK(expm_oracle(R{0.3, 0.2, 0.1}, 0.0) == Eigen::Matrix3d::Identity());
  const auto p = expm_oracle(R{1e-9, 1e-9, 0}, 1.0);
  CHECK(std::abs(p(0, 1)) < 1e-9);
  CHECK(std::abs(p(1, 2)) < 1e-9);
  CHECK_THROWS_AS(expm_oracle(R{0.1, 0.1, 0.1}, -1.0), std::invalid_argument);
}

TEST_CASE("closed form and oracle agree over the rate grid") {
  const std::array<double, 7> grid{0, 1e-6, 0.01, 0.1, 0.5, 1, 5};
  double worst = 0;
  for (double i : grid)
    for (double f : grid)
      for (double r : grid) worst = std::max(worst, max_abs_diff(transition_matrix(R{i, f, r}), expm_oracle(R{i, f, r}, 1.0)));
  CHECK(worst < 1e-8);
}

TEST_CASE("transition matrices are row stochastic") {
  std::mt19937_64 rng(11);
  std::lognormal_distribution<double> rate(-2.0, 2.0);
  for (int k = 0; k < 20000; ++k) {
    const R rates{rate(rng), rate(rng), k % 3 == 0 ? 0.0 : rate(rng)};
    const auto p = transition_matrix(rates);
    for (int row = 0; row < 3; ++row) {
      CHECK(std::abs(p.row(row).sum() - 1) < 1e-10);
      CHECK(p.row(row).minCoeff() >= 0);
      CHECK(p.row(row).maxCoeff() <= 1);
    }
    CHECK(p.row(2) == Eigen::RowVector3d(0, 0, 1));
    if (rates.rem == 0) CHECK(p(1, 0) == 0.0);
  }
}

TEST_CASE("occupancy path") {
  const auto s0 = disease_free_at_birth();
  SUBCASE("zero rates keep the initial state") {
    std::vector<R> rates(30, R{0, 0, 0});
    for (const auto& s : occupancy_path<double>(rates, s0)) CHECK(s == s0);
  }
  SUBCASE("one step gives the first row of P") {
    std::vector<R> rates{R{0.1, 0.2, 0.05}, R{0.1, 0.2, 0.05}};
    const auto path = occupancy_path<double>(rates, s0);
    REQUIRE(path.size() == 2);
    CHECK(path[1] == transition_matrix(rates[0]).row(0));
  }
  SUBCASE("state occupancy is a distribution and death absorbs") {
    std::vector<R> rates;
    for (int a = 0; a < 100; ++a) rates.push_back(R{0.001 * std::exp(0.05 * a), 0.01 * std::exp(0.04 * a), 0.02});
    const auto path = occupancy_path<double>(rates, s0);
    CHECK(path.size() == rates.size());
    for (std::size_t a = 0; a < path.size(); ++a) {
      CHECK(std::abs(path[a].sum() - 1) < 1e-10);
      CHECK(path[a].minCoeff() >= 0);
      if (a > 0) CHECK(path[a](2) >= path[a - 1](2));
    }
  }
}

TEST_CASE("prevalence and mortality probability") {
  CHECK(prevalence<double>(Occupancy<double>(0.5, 0.5, 0)) == 0.5);
  CHECK(prevalence<double>(Occupancy<double>(1, 0, 0)) == 0.0);
  CHECK(prevalence<double>(Occupancy<double>(0.2, 0.1, 0.7)) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK_THROWS_AS(prevalence<double>(Occupancy<double>(0, 0, 1)), std::domain_error);

  const auto p = transition_matrix(R{0.1, 0.2, 0});
  CHECK(mortality_probability<double>(p, 1.0) == p(1, 2));
  CHECK(mortality_probability<double>(p, 0.0) == p(0, 2));
  const auto oracle = expm_oracle(R{0.1, 0.2, 0}, 1.0);
  CHECK(mortality_probability<double>(p, 0.25) ==
        doctest::Approx(0.25 * oracle(1, 2) + 0.75 * oracle(0, 2)).epsilon(1e-9));
}

TEST_CASE("incidence probability") {
  CHECK(incidence_probability<double>(Eigen::Matrix3d::Identity()) == 0.0);
  CHECK(incidence_probability<double>(transition_matrix(R{0.05, 0.7, 0})) ==
        doctest::Approx(1 - std::exp(-0.05)).epsilon(1e-12));
  const auto oracle = expm_oracle(R{0.1, 0.2, 0.05}, 1.0);
  CHECK(incidence_probability<double>(transition_matrix(R{0.1, 0.2, 0.05})) ==
        doctest::Approx(1 - oracle(0, 0)).epsilon(1e-9));
}

TEST_CASE("Lexis recursion") {
  const int n_ages = 101;
  std::vector<R> rates;
  for (int a = 0; a < n_ages; ++a) rates.push_back(R{0.002 * std::exp(0.04 * a), 0.01 * std::exp(0.03 * a), 0.01});
  const auto s0 = disease_free_at_birth();
  const TrendMatrix ones = TrendMatrix::Ones(n_ages, kDataYear + 1);

  SUBCASE("unit trends reproduce the age-only path bit for bit") {
    const auto path = occupancy_path<double>(rates, s0);
    const auto lexis = occupancy_lexis<double>(rates, ones, ones, s0);
    REQUIRE(path.size() == lexis.size());
    for (std::size_t a = 0; a < path.size(); ++a) CHECK(path[a] == lexis[a]);
  }
  SUBCASE("age zero is the initial state whatever the trends") {
    TrendMatrix wild = TrendMatrix::Constant(n_ages, kDataYear + 1, 3.0);
    wild.col(kDataYear).setOnes();
    CHECK(occupancy_lexis<double>(rates, wild, ones, s0)[0] == s0);
  }
  SUBCASE("higher past incidence raises current prevalence") {
    TrendMatrix doubled = TrendMatrix::Constant(n_ages, kDataYear + 1, 2.0);
    doubled.col(kDataYear).setOnes();
    const auto base = occupancy_path<double>(rates, s0);
    const auto lexis = occupancy_lexis<double>(rates, doubled, ones, s0);
    for (int a = 1; a < n_ages; ++a) CHECK(prevalence(lexis[a]) > prevalence(base[a]));
  }
  SUBCASE("dimension mismatch") {
    const TrendMatrix short_trend = TrendMatrix::Ones(n_ages - 1, kDataYear + 1);
    CHECK_THROWS_AS(occupancy_lexis<double>(rates, short_trend, ones, s0), std::invalid_argument);
  }
}
