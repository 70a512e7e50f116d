#include "illdeath/data_prep.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <ceres/ceres.h>
#include <fmt/format.h>

#include <array>
#include <cmath>
#include <limits>

namespace illdeath {

namespace {

constexpr double kMaxBetaParam = 1e6;
constexpr double kMinBetaParam = 1e-4;
constexpr std::array<double, 3> kTargets{0.025, 0.5, 0.975};

struct QuantileResidual {
  std::array<double, 3> x;
  bool operator()(const double* log_ab, double* residual) const {
    const double a = std::exp(log_ab[0]);
    const double b = std::exp(log_ab[1]);
    for (int k = 0; k < 3; ++k) residual[k] = boost::math::ibeta(a, b, x[k]) - kTargets[k];
    return true;
  }
};

double objective(const std::array<double, 3>& x, double a, double b) {
  double sum = 0;
  for (int k = 0; k < 3; ++k) sum += std::pow(boost::math::ibeta(a, b, x[k]) - kTargets[k], 2);
  return sum;
}

void validate(const PointInterval& pi) {
  if (!(pi.lo >= 0 && pi.hi <= 1 && pi.lo <= pi.est && pi.est <= pi.hi)) {
    throw std::invalid_argument(
        fmt::format("interval ({}, {}, {}) must satisfy 0 <= lo <= est <= hi <= 1", pi.est, pi.lo, pi.hi));
  }
  if (!(pi.lo < pi.hi)) throw std::invalid_argument("interval has zero width");
  if (!(pi.est > 0 && pi.est < 1)) throw std::invalid_argument("estimate must lie strictly between 0 and 1");
}

}  // namespace

BetaFit fit_beta_quantiles(const PointInterval& pi, double max_objective) {
  validate(pi);
  const std::array<double, 3> x{pi.lo, pi.est, pi.hi};
  // Moment matching with the interval read as +-1.96 sd.
  const double sd = (pi.hi - pi.lo) / 3.92;
  const double size = std::clamp(pi.est * (1 - pi.est) / (sd * sd) - 1, 1e-2, kMaxBetaParam);
  BetaFit best{0, 0, std::numeric_limits<double>::infinity()};
  for (double scale : {1.0, 0.1, 10.0}) {
    std::array<double, 2> p{std::log(std::clamp(pi.est * size * scale, kMinBetaParam, kMaxBetaParam)),
                            std::log(std::clamp((1 - pi.est) * size * scale, kMinBetaParam, kMaxBetaParam))};
    ceres::Problem problem;
    problem.AddResidualBlock(
        new ceres::NumericDiffCostFunction<QuantileResidual, ceres::CENTRAL, 3, 2>(new QuantileResidual{x}), nullptr,
        p.data());
    for (int k = 0; k < 2; ++k) {
      problem.SetParameterLowerBound(p.data(), k, std::log(kMinBetaParam));
      problem.SetParameterUpperBound(p.data(), k, std::log(kMaxBetaParam));
    }
    ceres::Solver::Options options;
    options.max_num_iterations = 500;
    options.function_tolerance = 1e-16;
    options.gradient_tolerance = 1e-20;
    options.parameter_tolerance = 1e-14;
    options.logging_type = ceres::SILENT;
    ceres::Solver::Summary summary;
    ceres::Solve(options, &problem, &summary);
    const double a = std::exp(p[0]), b = std::exp(p[1]);
    const double value = objective(x, a, b);
    if (value < best.objective) best = {a, b, value};
  }
  if (!(best.objective <= max_objective)) {
    throw BetaFitError(fmt::format("no beta distribution matches interval ({}, {}, {}): best objective {:.3g}", pi.est,
                                   pi.lo, pi.hi, best.objective),
                       best.objective);
  }
  return best;
}

EffectiveCounts beta_from_quantiles(const PointInterval& pi, double max_objective) {
  const BetaFit fit = fit_beta_quantiles(pi, max_objective);
  return {fit.alpha, fit.alpha + fit.beta};
}

EffectiveCounts counts_from_estimate(double est, double denom) {
  if (!(denom > 0)) throw std::invalid_argument("denominator must be positive");
  if (!(est >= 0 && est <= 1)) throw std::invalid_argument("estimate must be a probability");
  return {est * denom, denom};
}

Eigen::VectorXd disaggregate_series(const std::vector<int>& widths, const Eigen::VectorXd& totals) {
  if (widths.empty() || static_cast<Eigen::Index>(widths.size()) != totals.size()) {
    throw std::invalid_argument("disaggregate: one total per group required");
  }
  int n = 0;
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("disaggregate: empty age group");
    n += w;
  }
  const int g = static_cast<int>(widths.size());
  constexpr double kRidge = 1e-8;
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + g, n + g);
  for (int i = 0; i + 2 < n; ++i) {
    const Eigen::Vector3d d(1, -2, 1);
    kkt.block(i, i, 3, 3) += d * d.transpose();
  }
  for (int i = 0; i + 1 < n; ++i) {
    const Eigen::Vector2d d(-1, 1);
    kkt.block(i, i, 2, 2) += kRidge * d * d.transpose();
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + g);
  for (int k = 0, at = 0; k < g; at += widths[k], ++k) {
    kkt.block(n + k, at, 1, widths[k]).setOnes();
    kkt.block(at, n + k, widths[k], 1).setOnes();
    rhs(n + k) = totals(k);
  }
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
  if (!lu.isInvertible()) throw std::runtime_error("disaggregate: constraints are infeasible");
  Eigen::VectorXd x = lu.solve(rhs).head(n);

  for (int k = 0, at = 0; k < g; at += widths[k], ++k) {
    auto seg = x.segment(at, widths[k]);
    seg.array() += (totals(k) - seg.sum()) / widths[k];
    if (seg.minCoeff() < 0) {
      seg = seg.cwiseMax(0.0);
      const double positive = seg.sum();
      if (positive > 0) {
        seg *= totals(k) / positive;
      } else {
        seg.setConstant(totals(k) / widths[k]);
      }
    }
  }
  return x;
}

YearlyCounts disaggregate(const std::vector<AgeGroupCounts>& groups) {
  if (groups.empty()) throw std::invalid_argument("disaggregate: no age groups");
  std::vector<int> widths;
  Eigen::VectorXd y(groups.size()), n(groups.size());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& grp = groups[k];
    if (grp.age_hi < grp.age_lo) throw std::invalid_argument(fmt::format("age group {}-{} is empty", grp.age_lo, grp.age_hi));
    if (k > 0 && grp.age_lo != groups[k - 1].age_hi + 1) {
      throw std::invalid_argument(fmt::format("age groups must be contiguous: {} follows {}", grp.age_lo, groups[k - 1].age_hi));
    }
    if (!(grp.y >= 0 && grp.n >= grp.y)) {
      throw std::invalid_argument(fmt::format("age group {}-{}: need 0 <= y <= n", grp.age_lo, grp.age_hi));
    }
    widths.push_back(grp.age_hi - grp.age_lo + 1);
    y(k) = grp.y;
    n(k) = grp.n;
  }
  YearlyCounts out{groups.front().age_lo, disaggregate_series(widths, y), disaggregate_series(widths, n)};
  for (std::size_t k = 0, at = 0; k < groups.size(); at += widths[k], ++k) {
    auto ys = out.y.segment(at, widths[k]);
    const auto ns = out.n.segment(at, widths[k]);
    if ((ys.array() > ns.array()).any()) ys = ns * (groups[k].n > 0 ? groups[k].y / groups[k].n : 0.0);
  }
  return out;
}

RemissionEstimate remission_from_survival(double survival10) {
  if (!(survival10 >= 0 && survival10 <= 1)) throw std::invalid_argument("survival must be a probability");
  if (survival10 == 1) throw std::invalid_argument("survival of 1 implies an infinite remission rate");
  const double r = -std::expm1(std::log1p(-survival10) / 10);
  return {r, -std::log1p(-r)};
}

EffectiveCounts downweight(double y, double n, double weight) {
  if (!(weight > 0 && weight <= 1)) throw std::invalid_argument("weight must lie in (0, 1]");
  return {y * weight, n * weight};
}

}  // namespace illdeath
