#include "illdeath/age_curves.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace illdeath;

TEST_CASE("basis shape and null-space structure") {
  const SplineBasis b = build_basis(100, 10);
  CHECK(b.g.rows() == 101);
  CHECK(b.g.cols() == 10);
  CHECK(b.g.col(0).isOnes(0.0));
  for (int a = 1; a <= 100; ++a) CHECK(b.g(a, 1) > b.g(a - 1, 1));
  CHECK(b.g(0, 1) == -1.0);
  CHECK(b.g(100, 1) == 1.0);
}

TEST_CASE("nonlinear columns are orthogonal to intercept and slope") {
  for (auto [max_age, dim] : {std::pair{100, 10}, std::pair{20, 5}, std::pair{60, 3}, std::pair{12, 12}}) {
    const SplineBasis b = build_basis(max_age, dim);
    const Eigen::MatrixXd lin = b.g.leftCols(2);
    const Eigen::MatrixXd proj = lin * lin.colPivHouseholderQr().solve(b.g.rightCols(dim - 2));
    for (int j = 0; j < dim - 2; ++j) {
      CHECK(proj.col(j).norm() / b.g.col(j + 2).norm() < 1e-8);
      CHECK(std::abs(b.g.col(j + 2).norm() - 1) < 1e-12);
    }
  }
}

TEST_CASE("basis is deterministic") {
  CHECK(build_basis(100, 10).g == build_basis(100, 10).g);
}

TEST_CASE("invalid basis dimensions") {
  CHECK_THROWS_AS(build_basis(100, 2), std::invalid_argument);
  CHECK_THROWS_AS(build_basis(5, 10), std::invalid_argument);
}

TEST_CASE("basis represents a cubic log-rate by least squares") {
  const SplineBasis b = build_basis(100, 10);
  Eigen::VectorXd target(101);
  for (int a = 0; a <= 100; ++a) {
    const double c = a - 50.0;
    target(a) = -8 + 0.08 * a - 8e-4 * c * c + 1e-5 * c * c * c;
  }
  const Eigen::VectorXd coef = b.g.colPivHouseholderQr().solve(target);
  CHECK((b.g * coef - target).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("log rate curves") {
  const SplineBasis b = build_basis(100, 10);
  SUBCASE("intercept only is constant") {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(10);
    beta(0) = -3.5;
    CHECK(log_rate_curve(beta, 0, b).isConstant(-3.5, 1e-15));
  }
  SUBCASE("slope only is the standardized age") {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(10);
    beta(1) = 1;
    const Eigen::VectorXd curve = log_rate_curve(beta, 0, b);
    for (int a = 0; a <= 100; ++a) CHECK(curve(a) == doctest::Approx((a - 50.0) / 50.0));
  }
  SUBCASE("constant below eqage") {
    std::mt19937 rng(3);
    std::normal_distribution<double> z;
    Eigen::VectorXd beta(10);
    for (auto& x : beta) x = z(rng);
    const Eigen::VectorXd curve = log_rate_curve(beta, 30, b);
    for (int a = 0; a < 30; ++a) CHECK(curve(a) == curve(30));
    CHECK(curve(31) != curve(30));
  }
  SUBCASE("zero nonlinear terms give an exactly log-linear curve") {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(10);
    beta(0) = -4;
    beta(1) = 2.5;
    const Eigen::VectorXd curve = log_rate_curve(beta, 0, b);
    for (int a = 1; a < 100; ++a) CHECK(std::abs(curve(a + 1) - 2 * curve(a) + curve(a - 1)) < 1e-12);
  }
}

TEST_CASE("increasing rate curves") {
  SUBCASE("flat log increments") {
    const SplineBasis b = build_basis(52, 10);
    const Eigen::VectorXd rates = increasing_rate_curve(std::log(0.1), Eigen::VectorXd::Zero(10), 50, b);
    for (int a = 0; a <= 50; ++a) CHECK(rates(a) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(rates(51) == doctest::Approx(0.1 + kIncrementScale).epsilon(1e-14));
    CHECK(rates(52) == doctest::Approx(0.1 + 2 * kIncrementScale).epsilon(1e-14));
  }
  SUBCASE("strictly increasing after eqage for random coefficients") {
    const SplineBasis b = build_basis(100, 10);
    std::mt19937 rng(5);
    std::normal_distribution<double> z(0, 3);
    for (int rep = 0; rep < 50; ++rep) {
      Eigen::VectorXd beta(10);
      for (auto& x : beta) x = z(rng);
      const Eigen::VectorXd rates = increasing_rate_curve(z(rng), beta, 20, b);
      for (int a = 21; a <= 100; ++a) CHECK(rates(a) > rates(a - 1));
      for (int a = 1; a <= 20; ++a) CHECK(rates(a) == rates(0));
    }
  }
  SUBCASE("recovers a known increasing curve through least squares on log increments") {
    const SplineBasis b = build_basis(100, 10);
    const int eqage = 30;
    Eigen::VectorXd truth(101);
    for (int a = 0; a <= 100; ++a) truth(a) = a <= eqage ? 0.002 : 0.002 + 1e-4 * (std::exp(0.06 * (a - eqage)) - 1);
    // Oracle: regress the observed log increments on the basis rows.
    Eigen::VectorXd log_inc(100 - eqage);
    for (int a = eqage + 1; a <= 100; ++a) log_inc(a - eqage - 1) = std::log((truth(a) - truth(a - 1)) / kIncrementScale);
    const Eigen::MatrixXd rows = b.g.bottomRows(100 - eqage);
    const Eigen::VectorXd beta = rows.colPivHouseholderQr().solve(log_inc);
    const Eigen::VectorXd fitted = increasing_rate_curve(std::log(0.002), beta, eqage, b);
    CHECK(((fitted - truth).array() / truth.array()).abs().maxCoeff() < 0.01);
  }
}

TEST_CASE("family names") {
  for (auto f : {CurveFamily::Smooth, CurveFamily::Increasing, CurveFamily::Constant, CurveFamily::Indep, CurveFamily::Zero}) {
    CHECK(parse_curve_family(to_string(f)) == f);
  }
  CHECK_THROWS_AS(parse_curve_family("spline"), std::invalid_argument);
}
