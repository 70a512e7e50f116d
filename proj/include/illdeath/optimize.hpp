#pragma once

#include "illdeath/sampler.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace illdeath {

struct OptimOptions {
  int max_iterations = 5000;
  /// Converged when |gradient|_2 < tolerance * (1 + |f|).
  double gradient_tolerance = 1e-5;
  int newton_steps = 30;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step
  std::string message;

  double gradient_norm() const { return gradient.norm(); }
};

/// Maximizes f: BFGS with a Wolfe line search, then Newton steps on a
/// finite-difference Hessian until the relative gradient test passes.
OptimResult maximize(const LogDensity& f, const Eigen::VectorXd& x0, const OptimOptions& options = {});

/// Symmetrized central differences of the analytic gradient.
Eigen::MatrixXd fd_hessian(const LogDensity& f, const Eigen::VectorXd& x, double rel_step = 1e-5);

}  // namespace illdeath
