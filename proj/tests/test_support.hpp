#pragma once

// Shared fixtures for the test suites.

#include "illdeath/disease_process.hpp"
#include "illdeath/model.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace illdeath::testing {

using R = RateTriple<double>;

/// IHD-like smooth truth over ages 0..max_age.
inline std::vector<R> smooth_truth(int max_age, double rem = 0.0) {
  std::vector<R> rates;
  for (int a = 0; a <= max_age; ++a) {
    const double inc = std::exp(-9.5 + 0.075 * a - 0.0002 * (a - 50.0) * (a - 50.0));
    const double cf = std::exp(-6.5 + 0.065 * a);
    rates.push_back(R{inc, cf, rem});
  }
  return rates;
}

/// Counts equal to denominators times the implied probabilities (fractional).
inline ObservedCounts expected_counts(const std::vector<R>& rates, double denom,
                                      std::initializer_list<Outcome> outcomes) {
  const int n = static_cast<int>(rates.size());
  const auto path = occupancy_path<double>(rates, disease_free_at_birth());
  ObservedCounts c(n - 1);
  for (Outcome o : outcomes) {
    Eigen::VectorXd y(n), d = Eigen::VectorXd::Constant(n, denom);
    for (int a = 0; a < n; ++a) {
      const auto p = transition_matrix(rates[a]);
      const double prev = prevalence(path[a]);
      double prob = 0;
      switch (o) {
        case Outcome::Inc: prob = incidence_probability(p); break;
        case Outcome::Prev: prob = prev; break;
        case Outcome::Mort: prob = mortality_probability(p, prev); break;
        case Outcome::Rem: prob = p(1, 0); break;
      }
      y(a) = denom * prob;
    }
    c.set(o, y, d);
  }
  return c;
}

/// Central finite-difference gradient.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Eigen::VectorXd up = x, down = x;
    up(j) += h;
    down(j) -= h;
    g(j) = (f(up) - f(down)) / (2 * h);
  }
  return g;
}

/// Largest componentwise error |a - b| / max(|b|, 1).
inline double max_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return ((a - b).array().abs() / b.array().abs().max(1.0)).maxCoeff();
}

}  // namespace illdeath::testing
