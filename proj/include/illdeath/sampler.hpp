#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

namespace illdeath {

/// Log density with optional gradient output. Must be safe to call
/// concurrently from several threads.
using LogDensity = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

enum class Metric { Diagonal, Dense };

struct NutsOptions {
  Metric metric = Metric::Diagonal;
  int warmup = 1000;
  int draws = 1000;
  double target_accept = 0.8;
  int max_depth = 10;
  double max_energy_error = 1000.0;
};

struct ChainResult {
  Eigen::MatrixXd draws;  // draws x dim
  Eigen::VectorXd log_density;
  Eigen::VectorXd accept_stat;
  std::vector<int> tree_depth;
  std::vector<bool> divergent;
  int warmup_divergences = 0;
  double step_size = 0;
  Eigen::VectorXd inv_metric;        // diagonal of the inverse metric
  Eigen::MatrixXd inv_metric_dense;  // full inverse metric when dense, else empty
  long gradient_evaluations = 0;

  int divergences() const;
};

/// One chain of the No-U-Turn sampler with multinomial trajectory sampling,
/// dual-averaging step size adaptation and windowed metric estimation during
/// warmup. The metric is diagonal unless `options.metric` asks for a dense one.
ChainResult run_nuts_chain(const LogDensity& log_density, const Eigen::VectorXd& init,
                           const NutsOptions& options, std::uint64_t seed);

/// Runs one chain per initial point; chain c uses seed + c. At most `threads`
/// chains run at once. The result does not depend on `threads`.
std::vector<ChainResult> run_nuts(const LogDensity& log_density, const std::vector<Eigen::VectorXd>& inits,
                                  const NutsOptions& options, std::uint64_t seed, int threads);

/// Split R-hat of one scalar quantity; each vector holds one chain's draws.
double split_rhat(const std::vector<Eigen::VectorXd>& chains);

/// Effective sample size across chains from Geyer's initial monotone
/// sequence estimator applied to the combined autocorrelations.
double effective_sample_size(const std::vector<Eigen::VectorXd>& chains);

/// Column `index` of each chain's draws.
std::vector<Eigen::VectorXd> parameter_chains(const std::vector<ChainResult>& chains, int index);

}  // namespace illdeath
