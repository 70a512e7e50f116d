#include "illdeath/age_curves.hpp"

#include <cmath>
#include <stdexcept>

namespace illdeath {

SplineBasis build_basis(int max_age, int dim) {
  if (dim < 3 || max_age < dim) {
    throw std::invalid_argument("build_basis: need K >= 3 and A >= K");
  }
  const int n = max_age + 1;
  const double half = max_age / 2.0;
  SplineBasis basis;
  basis.max_age = max_age;
  basis.g.resize(n, dim);
  basis.knots.resize(dim - 2);

  Eigen::VectorXd age = Eigen::VectorXd::LinSpaced(n, 0.0, max_age);
  basis.g.col(0).setOnes();
  basis.g.col(1) = (age.array() - half) / half;

  // Knots at the interior (j/(K-1)) quantiles of the uniform age grid.
  for (int j = 0; j < dim - 2; ++j) {
    basis.knots(j) = max_age * (j + 1.0) / (dim - 1.0);
  }

  // Orthonormal basis of the null space span{1, age}.
  Eigen::MatrixXd null_space(n, 2);
  null_space.col(0) = basis.g.col(0).normalized();
  null_space.col(1) = basis.g.col(1) - basis.g.col(1).dot(null_space.col(0)) * null_space.col(0);
  null_space.col(1).normalize();

  for (int j = 0; j < dim - 2; ++j) {
    Eigen::VectorXd col = (age.array() - basis.knots(j)).abs().cube().matrix();
    col /= col.norm();
    // Project twice: one pass leaves residual null-space components at the
    // level of the input's rounding error times its condition.
    for (int pass = 0; pass < 2; ++pass) col -= null_space * (null_space.transpose() * col);
    basis.g.col(j + 2) = col / col.norm();
  }
  return basis;
}

CurveFamily parse_curve_family(std::string_view name) {
  if (name == "smooth") return CurveFamily::Smooth;
  if (name == "increasing") return CurveFamily::Increasing;
  if (name == "const") return CurveFamily::Constant;
  if (name == "indep") return CurveFamily::Indep;
  if (name == "zero") return CurveFamily::Zero;
  throw std::invalid_argument("unknown rate model '" + std::string(name) +
                              "' (expected smooth, increasing, const, indep or zero)");
}

std::string to_string(CurveFamily family) {
  switch (family) {
    case CurveFamily::Smooth: return "smooth";
    case CurveFamily::Increasing: return "increasing";
    case CurveFamily::Constant: return "const";
    case CurveFamily::Indep: return "indep";
    case CurveFamily::Zero: return "zero";
  }
  return "?";
}

Eigen::VectorXd log_rate_curve(const Eigen::Ref<const Eigen::VectorXd>& beta, int eqage,
                               const SplineBasis& basis) {
  if (beta.size() != basis.dim()) throw std::invalid_argument("log_rate_curve: beta has wrong length");
  Eigen::VectorXd out = basis.g * beta;
  const int clamp = std::min(std::max(eqage, 0), basis.max_age);
  for (int a = 0; a < clamp; ++a) out(a) = out(clamp);
  return out;
}

Eigen::VectorXd increasing_rate_curve(double base_log_rate,
                                      const Eigen::Ref<const Eigen::VectorXd>& beta, int eqage,
                                      const SplineBasis& basis) {
  if (beta.size() != basis.dim()) {
    throw std::invalid_argument("increasing_rate_curve: beta has wrong length");
  }
  const Eigen::VectorXd log_increment = basis.g * beta;
  const int clamp = std::min(std::max(eqage, 0), basis.max_age);
  Eigen::VectorXd out(basis.n_ages());
  const double base = std::exp(base_log_rate);
  for (int a = 0; a < basis.n_ages(); ++a) {
    out(a) = a <= clamp ? base : out(a - 1) + kIncrementScale * std::exp(log_increment(a));
  }
  return out;
}

}  // namespace illdeath
