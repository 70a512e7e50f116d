#pragma once

#include "illdeath/disease_process.hpp"
#include "illdeath/model.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <vector>

namespace illdeath {

/// Known per-age rates used to generate data.
struct TrueRates {
  std::vector<RateTriple<double>> rates;  // ages 0..A

  int max_age() const { return static_cast<int>(rates.size()) - 1; }
  void validate() const;
};

/// Number of people in each state at each exact age 0..A, one row per age.
using StateCounts = Eigen::Matrix<long long, Eigen::Dynamic, 3>;

/// Simulates individual life histories from birth, drawing competing
/// exponential event times within each year of age. Individuals are split
/// into `shards` fixed blocks, each with its own random stream, so the
/// result depends only on the seed and shard count.
StateCounts microsimulate(const TrueRates& truth, long long cohort_size, std::uint64_t seed, int shards = 16,
                          int threads = 1);

/// Model-implied probability of each outcome at each age.
struct ImpliedProbabilities {
  Eigen::VectorXd inc, prev, mort, rem;
  const Eigen::VectorXd& get(Outcome o) const;
};

ImpliedProbabilities implied_probabilities(const TrueRates& truth,
                                           const Occupancy<double>& s0 = disease_free_at_birth());

/// Denominators per outcome; outcomes left empty are not generated.
using Denominators = std::array<std::optional<Eigen::VectorXd>, 4>;

Denominators constant_denominators(int max_age, double n, std::initializer_list<Outcome> outcomes);

/// Binomial draws y ~ Bin(n, p) with p from implied_probabilities.
/// Denominators are rounded to whole numbers.
ObservedCounts synthesize_counts(const TrueRates& truth, const Denominators& denominators, std::uint64_t seed);

}  // namespace illdeath
