#pragma once

// Three-state illness-death process: disease-free (0), disease (1), dead (2).
// Rates are constant within each integer year of age.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <vector>

namespace illdeath {

template <typename Scalar>
struct RateTriple {
  Scalar inc{0};
  Scalar cf{0};
  Scalar rem{0};
};

template <typename Scalar>
using TransitionMatrix = Eigen::Matrix<Scalar, 3, 3>;

/// State probabilities as a row vector, so that S_{a+1} = S_a * P_a.
template <typename Scalar>
using Occupancy = Eigen::Matrix<Scalar, 1, 3>;

/// Rate ratios by (age, calendar year), years 0..100 with the data year at
/// column 100.
using TrendMatrix = Eigen::ArrayXXd;

inline constexpr int kDataYear = 100;

namespace detail {

inline double value_of(double x) { return x; }

template <typename T>
  requires(!std::is_arithmetic_v<T>)
double value_of(const T& x) {
  return value_of(x.value());
}

/// Rounding can leave probabilities a few ulps below zero; pin those at zero.
template <typename Scalar>
TransitionMatrix<Scalar> clamp_rounding(TransitionMatrix<Scalar> p) {
  for (int row = 0; row < 2; ++row) {
    for (int col = 0; col < 3; ++col) {
      if (value_of(p(row, col)) < 0) p(row, col) = Scalar(0) * p(row, col);
    }
  }
  return p;
}

}  // namespace detail

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> intensity_matrix(const RateTriple<Scalar>& rates) {
  Eigen::Matrix<Scalar, 3, 3> q;
  q.setZero();
  q(0, 0) = -rates.inc;
  q(0, 1) = rates.inc;
  q(1, 0) = rates.rem;
  q(1, 1) = -(rates.rem + rates.cf);
  q(1, 2) = rates.cf;
  return q;
}

/// Matrix exponential of Q*t by scaling and squaring a truncated Taylor
/// series. Independent of the closed form in transition_matrix().
template <typename Scalar>
TransitionMatrix<Scalar> expm_oracle(const RateTriple<Scalar>& rates, double t) {
  using Mat = Eigen::Matrix<Scalar, 3, 3>;
  if (t < 0) throw std::invalid_argument("expm_oracle: negative time");
  Mat a = intensity_matrix(rates) * Scalar(t);

  double norm = 0;
  for (int r = 0; r < 3; ++r) {
    double row = 0;
    for (int c = 0; c < 3; ++c) row += std::abs(detail::value_of(a(r, c)));
    norm = std::max(norm, row);
  }
  int squarings = 0;
  while (norm > 0.125) {
    norm /= 2;
    ++squarings;
  }
  a /= Scalar(std::ldexp(1.0, squarings));

  // With ||A|| <= 1/8, 18 terms leave a remainder far below 1e-16.
  Mat result = Mat::Identity();
  Mat term = Mat::Identity();
  for (int k = 1; k <= 18; ++k) {
    term = (term * a) / Scalar(k);
    result += term;
  }
  for (int s = 0; s < squarings; ++s) result = (result * result).eval();
  return result;
}

/// Annual transition probabilities from the closed-form solution of the
/// Kolmogorov forward equation.
///
/// Written with e = exp(-u/2), v - w = 2 e sinh(q/2) and v + w = 2 e cosh(q/2),
/// which is algebraically identical to the usual expressions in u, q, v, w
/// but does not cancel catastrophically for small q. When q is effectively
/// zero the expressions are singular and the series oracle is used.
template <typename Scalar>
TransitionMatrix<Scalar> transition_matrix(const RateTriple<Scalar>& rates) {
  using std::cosh;
  using std::exp;
  using std::sinh;
  using std::sqrt;

  const Scalar& i = rates.inc;
  const Scalar& f = rates.cf;
  const Scalar& r = rates.rem;
  const Scalar u = i + r + f;
  // (i - f)^2 + r (r + 2i + 2f) expands to i^2 + 2ir - 2if + r^2 + 2fr + f^2
  // and is never negative in floating point.
  const Scalar q2 = (i - f) * (i - f) + r * (r + Scalar(2) * i + Scalar(2) * f);
  const double qv = std::sqrt(detail::value_of(q2));
  const double uv = detail::value_of(u);
  if (qv < 1e-8 * std::max(uv, 1.0)) return detail::clamp_rounding(expm_oracle(rates, 1.0));

  const Scalar q = sqrt(q2);
  const Scalar e = exp(-u / Scalar(2));
  const Scalar half_q = q / Scalar(2);
  const Scalar vmw_over_q = Scalar(2) * e * sinh(half_q) / q;  // (v - w) / q
  const Scalar vpw_half = e * cosh(half_q);                     // (v + w) / 2
  const Scalar skew = (f + r - i) / Scalar(2);                  // f + r - u/2

  TransitionMatrix<Scalar> p;
  p(0, 0) = vmw_over_q * skew + vpw_half;
  p(0, 1) = i * vmw_over_q;
  p(0, 2) = Scalar(1) - p(0, 0) - p(0, 1);
  p(1, 0) = r * vmw_over_q;
  p(1, 1) = vpw_half - vmw_over_q * skew;
  p(1, 2) = Scalar(1) - p(1, 0) - p(1, 1);
  p(2, 0) = Scalar(0);
  p(2, 1) = Scalar(0);
  p(2, 2) = Scalar(1);
  return detail::clamp_rounding(p);
}

/// S_0 = s0 and S_{a+1} = S_a P_a. Returns one occupancy per entry of
/// `rates_by_age` (ages 0..A); the rates at the final age are not needed.
template <typename Scalar>
std::vector<Occupancy<Scalar>> occupancy_path(std::span<const RateTriple<Scalar>> rates_by_age,
                                              const Occupancy<Scalar>& s0) {
  std::vector<Occupancy<Scalar>> path;
  if (rates_by_age.empty()) return path;
  path.reserve(rates_by_age.size());
  path.push_back(s0);
  for (std::size_t a = 0; a + 1 < rates_by_age.size(); ++a) {
    path.push_back(path.back() * transition_matrix(rates_by_age[a]));
  }
  return path;
}

inline Occupancy<double> disease_free_at_birth() { return Occupancy<double>(1.0, 0.0, 0.0); }

template <typename Scalar>
Scalar prevalence(const Occupancy<Scalar>& s) {
  const Scalar alive = s(0) + s(1);
  if (!(detail::value_of(alive) > 0)) {
    throw std::domain_error("prevalence: cohort has no surviving members");
  }
  return s(1) / alive;
}

template <typename Scalar>
Scalar mortality_probability(const TransitionMatrix<Scalar>& p, const Scalar& prev) {
  return p(1, 2) * prev + p(0, 2) * (Scalar(1) - prev);
}

template <typename Scalar>
Scalar incidence_probability(const TransitionMatrix<Scalar>& p) {
  return Scalar(1) - p(0, 0);
}

/// Rates experienced at (age, year) when the current rates are scaled by
/// the trend ratios. Remission carries no trend.
template <typename Scalar>
RateTriple<Scalar> trended_rates(const RateTriple<Scalar>& current, const TrendMatrix& inc_trend,
                                 const TrendMatrix& cf_trend, Eigen::Index age, Eigen::Index year) {
  return {current.inc * Scalar(inc_trend(age, year)), current.cf * Scalar(cf_trend(age, year)),
          current.rem};
}

inline void check_trend_dims(const TrendMatrix& trend, std::size_t n_ages, const char* what) {
  if (trend.rows() != static_cast<Eigen::Index>(n_ages) || trend.cols() != kDataYear + 1) {
    throw std::invalid_argument(std::string(what) +
                                ": trend matrix must have one row per age and 101 year columns");
  }
  if (n_ages > static_cast<std::size_t>(kDataYear) + 1) {
    throw std::invalid_argument(std::string(what) + ": ages beyond 100 are outside the trend window");
  }
}

/// Occupancy at each age in the data year, following each birth cohort along
/// its Lexis diagonal (b, y) = (0, 100 - a), ..., (a - 1, 99).
template <typename Scalar>
std::vector<Occupancy<Scalar>> occupancy_lexis(std::span<const RateTriple<Scalar>> current_rates,
                                               const TrendMatrix& inc_trend,
                                               const TrendMatrix& cf_trend,
                                               const Occupancy<Scalar>& s0) {
  check_trend_dims(inc_trend, current_rates.size(), "occupancy_lexis");
  check_trend_dims(cf_trend, current_rates.size(), "occupancy_lexis");
  std::vector<Occupancy<Scalar>> out;
  out.reserve(current_rates.size());
  for (std::size_t a = 0; a < current_rates.size(); ++a) {
    Occupancy<Scalar> s = s0;
    const Eigen::Index birth_year = kDataYear - static_cast<Eigen::Index>(a);
    for (std::size_t b = 0; b < a; ++b) {
      const auto year = birth_year + static_cast<Eigen::Index>(b);
      s = s * transition_matrix(
                  trended_rates(current_rates[b], inc_trend, cf_trend, static_cast<Eigen::Index>(b), year));
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace illdeath
