#pragma once

#include <Eigen/Dense>

#include <string>
#include <string_view>

namespace illdeath {

/// Penalized spline basis over integer ages 0..A.
///
/// Column 0 is the intercept, column 1 the standardized age (a - A/2)/(A/2),
/// and the remaining K-2 columns are cubic radial functions |a - knot|^3
/// projected off span{1, age} and scaled to unit Euclidean norm. The
/// nonlinear coefficients therefore only describe departures from a
/// log-linear age trend.
struct SplineBasis {
  int max_age = 0;
  Eigen::MatrixXd g;  // (A+1) x K
  Eigen::VectorXd knots;

  int dim() const { return static_cast<int>(g.cols()); }
  int n_ages() const { return static_cast<int>(g.rows()); }
};

SplineBasis build_basis(int max_age, int dim = 10);

/// Yearly increments of the increasing family are exp(spline) times this.
inline constexpr double kIncrementScale = 0.01;

enum class CurveFamily { Smooth, Increasing, Constant, Indep, Zero };

CurveFamily parse_curve_family(std::string_view name);
std::string to_string(CurveFamily family);

/// log rate_a = g(max(a, eqage)) . beta, i.e. constant below eqage.
Eigen::VectorXd log_rate_curve(const Eigen::Ref<const Eigen::VectorXd>& beta, int eqage,
                               const SplineBasis& basis);

/// rate_a = exp(base) for a <= eqage, then
/// rate_a = rate_{a-1} + kIncrementScale * exp(g(a) . beta).
Eigen::VectorXd increasing_rate_curve(double base_log_rate,
                                      const Eigen::Ref<const Eigen::VectorXd>& beta, int eqage,
                                      const SplineBasis& basis);

}  // namespace illdeath
