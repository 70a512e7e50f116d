#include "illdeath/simulator.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <thread>

namespace illdeath {

void TrueRates::validate() const {
  if (rates.empty()) throw std::invalid_argument("true rates: no ages");
  for (std::size_t a = 0; a < rates.size(); ++a) {
    const auto& r = rates[a];
    for (double x : {r.inc, r.cf, r.rem}) {
      if (!(x >= 0) || !std::isfinite(x)) {
        throw std::invalid_argument(fmt::format("true rates: invalid rate at age {}", a));
      }
    }
  }
}

namespace {

/// Simulates `count` people and adds their states at each exact age.
void simulate_block(const TrueRates& truth, long long count, std::uint64_t seed, StateCounts& out) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> unit(1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const int n_ages = static_cast<int>(truth.rates.size());
  for (long long person = 0; person < count; ++person) {
    int state = 0;
    for (int a = 0; a < n_ages; ++a) {
      ++out(a, state);
      if (state == 2 || a == n_ages - 1) {
        if (state == 2) {
          for (int rest = a + 1; rest < n_ages; ++rest) ++out(rest, 2);
        }
        break;
      }
      const auto& r = truth.rates[a];
      double t = 0;
      while (state != 2) {
        const double total = state == 0 ? r.inc : r.cf + r.rem;
        if (total <= 0) break;
        t += unit(rng) / total;
        if (t >= 1) break;
        if (state == 0) {
          state = 1;
        } else {
          state = uniform(rng) * total < r.cf ? 2 : 0;
        }
      }
    }
  }
}

}  // namespace

StateCounts microsimulate(const TrueRates& truth, long long cohort_size, std::uint64_t seed, int shards, int threads) {
  truth.validate();
  if (cohort_size < 1) throw std::invalid_argument("microsimulate: cohort size must be at least 1");
  shards = std::max(1, shards);
  const int n_ages = static_cast<int>(truth.rates.size());
  std::vector<StateCounts> parts(shards, StateCounts::Zero(n_ages, 3));
  auto run = [&](int s) {
    const long long begin = cohort_size * s / shards;
    const long long end = cohort_size * (s + 1) / shards;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(s)};
    std::mt19937_64 seeder(seq);
    simulate_block(truth, end - begin, seeder(), parts[s]);
  };
  threads = std::max(1, threads);
  for (int first = 0; first < shards; first += threads) {
    std::vector<std::thread> pool;
    const int last = std::min(shards, first + threads);
    for (int s = first + 1; s < last; ++s) pool.emplace_back(run, s);
    run(first);
    for (auto& t : pool) t.join();
  }
  StateCounts total = StateCounts::Zero(n_ages, 3);
  for (const auto& p : parts) total += p;
  return total;
}

const Eigen::VectorXd& ImpliedProbabilities::get(Outcome o) const {
  switch (o) {
    case Outcome::Inc: return inc;
    case Outcome::Prev: return prev;
    case Outcome::Mort: return mort;
    case Outcome::Rem: return rem;
  }
  return mort;
}

ImpliedProbabilities implied_probabilities(const TrueRates& truth, const Occupancy<double>& s0) {
  truth.validate();
  const int n = static_cast<int>(truth.rates.size());
  const auto path = occupancy_path<double>(truth.rates, s0);
  ImpliedProbabilities out;
  out.inc.resize(n);
  out.prev.resize(n);
  out.mort.resize(n);
  out.rem.resize(n);
  for (int a = 0; a < n; ++a) {
    const auto p = transition_matrix(truth.rates[a]);
    out.prev(a) = prevalence(path[a]);
    out.inc(a) = incidence_probability(p);
    out.mort(a) = mortality_probability(p, out.prev(a));
    out.rem(a) = p(1, 0);
  }
  return out;
}

Denominators constant_denominators(int max_age, double n, std::initializer_list<Outcome> outcomes) {
  Denominators d;
  for (Outcome o : outcomes) d[static_cast<int>(o)] = Eigen::VectorXd::Constant(max_age + 1, n);
  return d;
}

ObservedCounts synthesize_counts(const TrueRates& truth, const Denominators& denominators, std::uint64_t seed) {
  const ImpliedProbabilities probs = implied_probabilities(truth);
  const int n_ages = static_cast<int>(truth.rates.size());
  ObservedCounts counts(n_ages - 1);
  std::mt19937_64 rng(seed);
  for (Outcome o : kOutcomes) {
    const auto& denom = denominators[static_cast<int>(o)];
    if (!denom) continue;
    if (denom->size() != n_ages) throw std::invalid_argument("synthesize_counts: denominators cover the wrong ages");
    Eigen::VectorXd y(n_ages), n(n_ages);
    for (int a = 0; a < n_ages; ++a) {
      if (!((*denom)(a) >= 0)) throw std::invalid_argument("synthesize_counts: negative denominator");
      const auto trials = static_cast<long long>(std::llround((*denom)(a)));
      const double p = std::clamp(probs.get(o)(a), 0.0, 1.0);
      std::binomial_distribution<long long> draw(trials, p);
      n(a) = static_cast<double>(trials);
      y(a) = trials > 0 ? static_cast<double>(draw(rng)) : 0.0;
    }
    counts.set(o, y, n);
  }
  return counts;
}

}  // namespace illdeath
