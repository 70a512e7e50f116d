#include "illdeath/inference.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace illdeath {

namespace {

constexpr double kMinEigenvalue = 1e-8;

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double h = (static_cast<double>(sorted.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double median_of(Eigen::VectorXd v) {
  std::vector<double> s(v.data(), v.data() + v.size());
  std::sort(s.begin(), s.end());
  return quantile_sorted(s, 0.5);
}

LogDensity density_of(const Model& model) {
  return [&model](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return model.log_posterior(x, g); };
}

const Eigen::VectorXd& variable(const GroupQuantities& q, int index) {
  switch (index) {
    case 0: return q.cf;
    case 1: return q.inc;
    case 2: return q.rem;
    case 3: return q.prev;
    case 4: return q.mort;
    default: return q.inc_prob;
  }
}

/// Quantities for each draw; failed evaluations come back empty.
std::vector<std::vector<GroupQuantities>> draw_quantities(const Model& model, const Eigen::MatrixXd& draws,
                                                          int& failed) {
  std::vector<std::vector<GroupQuantities>> out(draws.rows());
  failed = 0;
  for (Eigen::Index s = 0; s < draws.rows(); ++s) {
    try {
      auto q = model.quantities(draws.row(s).transpose());
      bool ok = true;
      for (const auto& g : q) {
        for (int v = 0; v < 6; ++v) ok = ok && variable(g, v).allFinite();
      }
      if (ok) out[s] = std::move(q);
      else ++failed;
    } catch (const std::exception&) {
      ++failed;
    }
  }
  return out;
}

std::vector<Eigen::VectorXd> jittered_starts(const Model& model, int count, double sd, std::uint64_t seed) {
  std::vector<Eigen::VectorXd> starts;
  const Eigen::VectorXd base = model.initial_point();
  starts.push_back(base);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, sd);
  for (int k = 1; k < count; ++k) {
    Eigen::VectorXd x = base;
    for (auto& v : x) v += z(rng);
    starts.push_back(x);
  }
  return starts;
}

}  // namespace

std::string to_string(Method method) { return method == Method::Opt ? "opt" : "mcmc"; }

Method parse_method(std::string_view name) {
  if (name == "opt") return Method::Opt;
  if (name == "mcmc") return Method::Mcmc;
  throw std::invalid_argument(fmt::format("unknown method '{}' (expected opt or mcmc)", name));
}

Eigen::VectorXd FitResult::point() const {
  if (method == Method::Opt) return mode;
  Eigen::VectorXd out(draws.cols());
  for (Eigen::Index j = 0; j < draws.cols(); ++j) out(j) = median_of(draws.col(j));
  return out;
}

FitResult fit_mode(std::shared_ptr<const Model> model, const FitOptions& options) {
  const LogDensity f = density_of(*model);
  OptimResult best;
  best.value = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  for (const auto& start : jittered_starts(*model, std::max(1, options.restarts), options.jitter_sd, options.seed)) {
    OptimResult r = maximize(f, start, options.optim);
    if (!std::isfinite(r.value)) continue;
    // Prefer converged runs; among those, the highest density.
    const bool better = !have_best || (r.converged && !best.converged) ||
                        (r.converged == best.converged && r.value > best.value);
    if (better) {
      best = std::move(r);
      have_best = true;
    }
  }
  if (!have_best) throw ConvergenceError("optimizer could not evaluate the posterior at any starting point", {});

  FitResult fit;
  fit.method = Method::Opt;
  fit.model = model;
  fit.mode = best.x;
  Diagnostics& d = fit.diagnostics;
  d.log_posterior = best.value;
  d.gradient_norm = best.gradient_norm();
  d.iterations = best.iterations;
  d.trace = best.trace;
  d.converged = best.converged;
  if (!best.converged) {
    const std::string msg = fmt::format("optimizer did not converge: {} (|gradient| = {:.3g}, log posterior = {:.6g})",
                                        best.message, d.gradient_norm, best.value);
    if (!options.allow_nonconvergence) throw ConvergenceError(msg, best.trace);
    d.warnings.push_back(msg);
  }

  const Eigen::MatrixXd neg_h = -fd_hessian(f, fit.mode);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(neg_h);
  const Eigen::VectorXd lambda = eig.eigenvalues();
  d.hessian_min_eigenvalue = lambda(0);
  d.hessian_condition = lambda(lambda.size() - 1) / lambda(0);
  if (!(lambda(0) >= kMinEigenvalue)) {
    Eigen::Index worst = 0;
    eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&worst);
    const std::string name = model->layout().labels()[worst];
    throw NonIdentifiableError(
        fmt::format("negative Hessian at the mode is not positive definite: smallest eigenvalue {:.3g}, "
                    "dominated by parameter {}; consider fixing hyperparameters (hp_fixed)",
                    lambda(0), name),
        lambda(0), name);
  }
  const Eigen::MatrixXd& v = eig.eigenvectors();
  fit.covariance = v * lambda.cwiseInverse().asDiagonal() * v.transpose();

  const Eigen::MatrixXd root = v * lambda.cwiseSqrt().cwiseInverse().asDiagonal();
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> z;
  fit.draws.resize(options.laplace_draws, model->dim());
  Eigen::VectorXd e(model->dim());
  for (int s = 0; s < options.laplace_draws; ++s) {
    for (auto& x : e) x = z(rng);
    fit.draws.row(s) = (fit.mode + root * e).transpose();
  }
  return fit;
}

FitResult fit_mode(const Dataset& data, const ModelSpec& spec, const FitOptions& options) {
  return fit_mode(std::make_shared<const Model>(data, spec), options);
}

FitResult fit_mcmc(std::shared_ptr<const Model> model, const FitOptions& options) {
  if (options.chains < 2) throw std::invalid_argument("fit_mcmc: need at least 2 chains");
  if (options.iterations < 4) throw std::invalid_argument("fit_mcmc: need at least 4 iterations per chain");
  const LogDensity f = density_of(*model);

  std::vector<Eigen::VectorXd> inits;
  const Eigen::VectorXd base = model->initial_point();
  std::normal_distribution<double> z(0.0, options.jitter_sd);
  for (int c = 0; c < options.chains; ++c) {
    std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                      static_cast<std::uint32_t>(c), 0x696e6974u};
    std::mt19937_64 rng(seq);
    Eigen::VectorXd x = base;
    for (auto& v : x) v += z(rng);
    inits.push_back(x);
  }

  NutsOptions nuts;
  nuts.warmup = options.warmup;
  nuts.draws = options.iterations;
  nuts.target_accept = options.target_accept;
  nuts.max_depth = options.max_depth;
  nuts.metric = options.metric;

  FitResult fit;
  fit.method = Method::Mcmc;
  fit.model = model;
  fit.chains = run_nuts(f, inits, nuts, options.seed, options.threads);

  const int dim = model->dim();
  fit.draws.resize(static_cast<Eigen::Index>(options.chains) * options.iterations, dim);
  Diagnostics& d = fit.diagnostics;
  for (int c = 0; c < options.chains; ++c) {
    fit.draws.middleRows(static_cast<Eigen::Index>(c) * options.iterations, options.iterations) = fit.chains[c].draws;
    d.divergences += fit.chains[c].divergences();
    d.step_sizes.push_back(fit.chains[c].step_size);
  }
  d.divergence_fraction = static_cast<double>(d.divergences) / static_cast<double>(fit.draws.rows());
  d.rhat.resize(dim);
  d.ess.resize(dim);
  for (int j = 0; j < dim; ++j) {
    const auto per_chain = parameter_chains(fit.chains, j);
    d.rhat(j) = split_rhat(per_chain);
    d.ess(j) = effective_sample_size(per_chain);
  }
  if (d.divergence_fraction > 0.1) {
    d.converged = false;
    d.warnings.push_back(fmt::format("{:.1f}% of transitions diverged", 100 * d.divergence_fraction));
  }
  const double max_rhat = dim > 0 ? d.rhat.maxCoeff() : 1.0;
  if (!(max_rhat <= 1.05)) {
    d.converged = false;
    d.warnings.push_back(fmt::format("largest split R-hat is {:.3f}", max_rhat));
  }
  return fit;
}

FitResult fit_mcmc(const Dataset& data, const ModelSpec& spec, const FitOptions& options) {
  return fit_mcmc(std::make_shared<const Model>(data, spec), options);
}

std::vector<std::string> TidyTable::quantile_columns() const {
  if (quantiles.size() == 2 && std::abs(quantiles[0] + quantiles[1] - 1) < 1e-12 && quantiles[0] < 0.5) {
    return {"lo", "hi"};
  }
  std::vector<std::string> out;
  for (double q : quantiles) out.push_back(fmt::format("q{:g}", 100 * q));
  return out;
}

TidyTable tidy(const FitResult& fit, const TidyOptions& options) {
  const Model& model = *fit.model;
  std::vector<int> vars;
  if (options.vars.empty()) {
    for (int v = 0; v < 6; ++v) vars.push_back(v);
  } else {
    for (const auto& name : options.vars) {
      const auto it = std::find(kTidyVariables.begin(), kTidyVariables.end(), name);
      if (it == kTidyVariables.end()) throw std::invalid_argument(fmt::format("tidy: unknown variable '{}'", name));
      vars.push_back(static_cast<int>(it - kTidyVariables.begin()));
    }
  }
  for (double q : options.quantiles) {
    if (!(q > 0 && q < 1)) throw std::invalid_argument("tidy: quantiles must lie in (0, 1)");
  }
  const int max_age = model.data().max_age();
  const int age_lo = std::max(0, options.age_min.value_or(0));
  const int age_hi = std::min(max_age, options.age_max.value_or(max_age));

  TidyTable table;
  table.quantiles = options.quantiles;
  int failed = 0;
  const auto per_draw = draw_quantities(model, fit.draws, failed);
  std::vector<GroupQuantities> at_mode;
  if (fit.method == Method::Opt) at_mode = model.quantities(fit.mode);

  const auto& groups = model.data().groups;
  std::vector<double> values;
  for (int v : vars) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (int a = age_lo; a <= age_hi; ++a) {
        values.clear();
        for (const auto& q : per_draw) {
          if (!q.empty()) values.push_back(variable(q[g], v)(a));
        }
        std::sort(values.begin(), values.end());
        TidyRow row;
        row.var = kTidyVariables[v];
        row.age = a;
        row.group = model.data().area_names[groups[g].area];
        row.gender = model.data().gender_names[groups[g].gender];
        const bool any = !values.empty();
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.point = fit.method == Method::Opt ? variable(at_mode[g], v)(a) : (any ? quantile_sorted(values, 0.5) : nan);
        for (double q : options.quantiles) {
          double x = any ? quantile_sorted(values, q) : nan;
          if (q < 0.5) x = std::min(x, row.point);
          if (q > 0.5) x = std::max(x, row.point);
          row.q.push_back(x);
        }
        table.rows.push_back(std::move(row));
      }
    }
  }
  return table;
}

ModelSpec fix_hyperparameters(const ModelSpec& spec, const FitResult& fit, const std::vector<std::string>& names) {
  ModelSpec out = spec;
  const auto& blocks = hyperparameter_blocks();
  const Eigen::VectorXd point = fit.point();
  for (const auto& name : names) {
    const auto it = blocks.find(name);
    if (it == blocks.end()) throw std::invalid_argument(fmt::format("'{}' is not a hyperparameter", name));
    if (!fit.model->layout().has(it->second)) {
      throw std::invalid_argument(fmt::format("hyperparameter '{}' is not estimated in this model", name));
    }
    out.hp_fixed[name] = std::exp(point(fit.model->layout().block(it->second).offset));
  }
  return out;
}

}  // namespace illdeath
