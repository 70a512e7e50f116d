#pragma once

#include "illdeath/model.hpp"
#include "illdeath/optimize.hpp"
#include "illdeath/sampler.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace illdeath {

enum class Method { Opt, Mcmc };

std::string to_string(Method method);
Method parse_method(std::string_view name);

struct FitOptions {
  // Posterior mode
  int restarts = 3;  // the data-driven start plus jittered copies of it
  double jitter_sd = 0.1;
  int laplace_draws = 1000;
  OptimOptions optim;
  /// Return a flagged result instead of throwing when the optimizer misses
  /// the gradient tolerance.
  bool allow_nonconvergence = false;

  // MCMC
  int chains = 4;
  int warmup = 1000;
  int iterations = 1000;  // kept draws per chain
  double target_accept = 0.8;
  int max_depth = 10;
  Metric metric = Metric::Diagonal;

  std::uint64_t seed = 1;
  int threads = 1;
};

struct Diagnostics {
  static constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

  bool converged = true;
  std::vector<std::string> warnings;
  int failed_draws = 0;  // draws whose implied rates could not be evaluated

  // Posterior mode
  double log_posterior = kNaN;
  double gradient_norm = kNaN;
  int iterations = 0;
  double hessian_min_eigenvalue = kNaN;
  double hessian_condition = kNaN;
  std::vector<double> trace;

  // MCMC
  Eigen::VectorXd rhat;
  Eigen::VectorXd ess;
  int divergences = 0;
  double divergence_fraction = 0;
  std::vector<double> step_sizes;
};

struct FitResult {
  Method method = Method::Opt;
  std::shared_ptr<const Model> model;
  Eigen::VectorXd mode;        // opt
  Eigen::MatrixXd covariance;  // opt, unconstrained scale
  /// Posterior draws, one row each: Laplace draws (opt) or all chains
  /// stacked chain by chain (mcmc).
  Eigen::MatrixXd draws;
  std::vector<ChainResult> chains;  // mcmc
  Diagnostics diagnostics;

  /// Mode (opt) or componentwise posterior median (mcmc).
  Eigen::VectorXd point() const;
};

/// The optimizer did not reach the gradient tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<double> trace;
};

/// The negative Hessian at the mode is not positive definite.
class NonIdentifiableError : public std::runtime_error {
 public:
  NonIdentifiableError(const std::string& what, double eigenvalue, std::string parameter)
      : std::runtime_error(what), eigenvalue(eigenvalue), parameter(std::move(parameter)) {}
  double eigenvalue;
  std::string parameter;  // largest loading in the offending eigenvector
};

FitResult fit_mode(std::shared_ptr<const Model> model, const FitOptions& options = {});
FitResult fit_mode(const Dataset& data, const ModelSpec& spec, const FitOptions& options = {});
FitResult fit_mcmc(std::shared_ptr<const Model> model, const FitOptions& options = {});
FitResult fit_mcmc(const Dataset& data, const ModelSpec& spec, const FitOptions& options = {});

inline const std::vector<std::string> kTidyVariables{"cf", "inc", "rem", "prev", "mort", "inc_prob"};

struct TidyOptions {
  std::vector<double> quantiles{0.025, 0.975};
  std::vector<std::string> vars;  // empty = all
  std::optional<int> age_min, age_max;
};

struct TidyRow {
  std::string var;
  int age = 0;
  std::string group;
  std::string gender;
  double point = 0;
  std::vector<double> q;  // one per requested quantile
};

struct TidyTable {
  std::vector<double> quantiles;
  std::vector<TidyRow> rows;

  /// A symmetric pair (q, 1 - q) is reported as lo/hi; other quantile sets
  /// get one column per quantile named q<percent>.
  std::vector<std::string> quantile_columns() const;
};

/// Per-age summaries of rates and implied probabilities, recomputed from
/// the parameter draws. Point = mode (opt) or median (mcmc).
TidyTable tidy(const FitResult& fit, const TidyOptions& options = {});

/// Pins the named hyperparameters at their posterior-mode values.
ModelSpec fix_hyperparameters(const ModelSpec& spec, const FitResult& fit, const std::vector<std::string>& names);

}  // namespace illdeath
