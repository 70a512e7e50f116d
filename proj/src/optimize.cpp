#include "illdeath/optimize.hpp"

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <glog/logging.h>

#include <cmath>
#include <limits>

namespace illdeath {

namespace {

class NegatedDensity : public ceres::FirstOrderFunction {
 public:
  NegatedDensity(const LogDensity& f, int dim) : f_(f), dim_(dim) {}

  bool Evaluate(const double* parameters, double* cost, double* gradient) const override {
    const Eigen::Map<const Eigen::VectorXd> x(parameters, dim_);
    Eigen::VectorXd g;
    const double value = f_(x, gradient ? &g : nullptr);
    if (!std::isfinite(value) || (gradient && !g.allFinite())) return false;
    *cost = -value;
    if (gradient) Eigen::Map<Eigen::VectorXd>(gradient, dim_) = -g;
    return true;
  }

  int NumParameters() const override { return dim_; }

 private:
  const LogDensity& f_;
  int dim_;
};

class TraceCallback : public ceres::IterationCallback {
 public:
  explicit TraceCallback(std::vector<double>& trace) : trace_(trace) {}
  ceres::CallbackReturnType operator()(const ceres::IterationSummary& summary) override {
    if (summary.step_is_successful) trace_.push_back(-summary.cost);
    return ceres::SOLVER_CONTINUE;
  }

 private:
  std::vector<double>& trace_;
};

bool small_gradient(const Eigen::VectorXd& g, double value, double tol) {
  return g.norm() < tol * (1 + std::abs(value));
}

}  // namespace

Eigen::MatrixXd fd_hessian(const LogDensity& f, const Eigen::VectorXd& x, double rel_step) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd g_up, g_down;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double step = rel_step * std::max(1.0, std::abs(x(j)));
    Eigen::VectorXd up = x, down = x;
    up(j) += step;
    down(j) -= step;
    f(up, &g_up);
    f(down, &g_down);
    h.col(j) = (g_up - g_down) / (2 * step);
  }
  return 0.5 * (h + h.transpose());
}

OptimResult maximize(const LogDensity& f, const Eigen::VectorXd& x0, const OptimOptions& options) {
  OptimResult out;
  const int dim = static_cast<int>(x0.size());
  std::vector<double> x(x0.data(), x0.data() + dim);
  {
    Eigen::VectorXd g;
    if (!std::isfinite(f(x0, &g))) {
      out.x = x0;
      out.value = -std::numeric_limits<double>::infinity();
      out.gradient = Eigen::VectorXd::Zero(dim);
      out.message = "log density is not finite at the starting point";
      return out;
    }
  }

  // BFGS update failures are recovered from internally; keep them off stderr.
  FLAGS_minloglevel = std::max(FLAGS_minloglevel, 2);
  TraceCallback callback(out.trace);
  ceres::GradientProblem problem(new NegatedDensity(f, dim));
  ceres::GradientProblemSolver::Options solver;
  solver.line_search_direction_type = ceres::BFGS;
  solver.max_num_iterations = options.max_iterations;
  solver.function_tolerance = 1e-14;
  solver.gradient_tolerance = 1e-12;
  solver.parameter_tolerance = 1e-14;
  solver.logging_type = ceres::SILENT;
  solver.callbacks.push_back(&callback);
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(solver, problem, x.data(), &summary);
  out.iterations = static_cast<int>(summary.iterations.size());

  out.x = Eigen::Map<Eigen::VectorXd>(x.data(), dim);
  out.value = f(out.x, &out.gradient);

  // Newton polishing: quasi-Newton line searches stall short of tight
  // gradient tolerances on badly scaled posteriors.
  double damping = 0;
  for (int step = 0; step < options.newton_steps; ++step) {
    if (small_gradient(out.gradient, out.value, options.gradient_tolerance)) break;
    const Eigen::MatrixXd neg_h = -fd_hessian(f, out.x);
    bool improved = false;
    for (int attempt = 0; attempt < 12 && !improved; ++attempt) {
      Eigen::MatrixXd a = neg_h;
      a.diagonal().array() += damping * std::max(1.0, neg_h.diagonal().cwiseAbs().maxCoeff());
      Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
      const bool pd = ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0).all();
      if (pd) {
        const Eigen::VectorXd d = ldlt.solve(out.gradient);
        for (double t = 1.0; t > 1e-4 && !improved; t *= 0.5) {
          const Eigen::VectorXd trial = out.x + t * d;
          Eigen::VectorXd g;
          const double v = f(trial, &g);
          if (!std::isfinite(v)) continue;
          if (v > out.value - 1e-12 * (1 + std::abs(out.value)) && g.norm() < out.gradient.norm()) {
            out.x = trial;
            out.value = v;
            out.gradient = g;
            out.trace.push_back(v);
            improved = true;
          }
        }
      }
      if (!improved) damping = damping == 0 ? 1e-8 : damping * 10;
    }
    if (!improved) break;
    damping = damping / 10 < 1e-8 ? 0 : damping / 10;
  }

  out.converged = small_gradient(out.gradient, out.value, options.gradient_tolerance);
  out.message = out.converged ? "converged" : "gradient tolerance not reached: " + summary.BriefReport();
  return out;
}

}  // namespace illdeath
