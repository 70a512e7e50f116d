#pragma once

#include "illdeath/age_curves.hpp"
#include "illdeath/disease_process.hpp"

#include <Eigen/Dense>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace illdeath {

enum class Outcome { Inc = 0, Prev = 1, Mort = 2, Rem = 3 };
inline constexpr std::array<Outcome, 4> kOutcomes{Outcome::Inc, Outcome::Prev, Outcome::Mort,
                                                  Outcome::Rem};

std::string to_string(Outcome outcome);
Outcome parse_outcome(std::string_view name);

/// Numerator/denominator series for one outcome, one entry per age.
/// Counts may be fractional (disaggregated or downweighted data).
struct CountSeries {
  Eigen::VectorXd y;
  Eigen::VectorXd n;
};

/// Data for one homogeneous population (one area and gender), ages 0..A.
struct ObservedCounts {
  int max_age = 0;
  std::array<std::optional<CountSeries>, 4> series;

  explicit ObservedCounts(int max_age = 0) : max_age(max_age) {}

  bool has(Outcome o) const { return series[static_cast<int>(o)].has_value(); }
  const CountSeries& get(Outcome o) const { return *series[static_cast<int>(o)]; }
  CountSeries& set(Outcome o, Eigen::VectorXd y, Eigen::VectorXd n);
  void drop(Outcome o) { series[static_cast<int>(o)].reset(); }

  /// Throws std::invalid_argument when the data cannot identify the model:
  /// mortality is required, plus incidence or prevalence; y <= n >= 0.
  void validate() const;
};

struct GroupData {
  int area = 0;
  int gender = 0;  // 0 = reference level, 1 = the additive (male) level
  ObservedCounts counts;
};

struct Dataset {
  std::vector<std::string> area_names{"all"};
  std::vector<std::string> gender_names{""};
  std::vector<GroupData> groups;

  int max_age() const { return groups.empty() ? -1 : groups.front().counts.max_age; }
  int n_areas() const { return static_cast<int>(area_names.size()); }
  int n_genders() const { return static_cast<int>(gender_names.size()); }
};

Dataset single_group(ObservedCounts counts);

struct RateModel {
  CurveFamily family = CurveFamily::Smooth;
  int eqage = 0;
};

struct GammaPrior {
  double shape = 2.0;
  double rate = 1.0;
};

struct PriorSettings {
  double intercept_sd = 100.0;  // non-hierarchical intercept and slope
  double slope_sd = 100.0;
  GammaPrior smoothness{2.0, 1.0};
  double area_mean_intercept_mean = 0.0;
  double area_mean_intercept_sd = 10.0;
  double common_slope_mean = 5.0;
  double common_slope_sd = 5.0;
  GammaPrior area_sd{};  // elicited from a 5-fold / 50-fold ratio unless overridden
  double male_linear_sd = 0.82;
  double rem_lograte_mean = 0.0;
  double rem_lograte_sd = 10.0;
  double indep_lograte_sd = 10.0;
  double const_lograte_mean = 0.0;  // constant incidence or case fatality
  double const_lograte_sd = 100.0;

  PriorSettings();
};

struct ModelSpec {
  RateModel cf{CurveFamily::Smooth, 0};
  RateModel inc{CurveFamily::Smooth, 0};
  RateModel rem{CurveFamily::Zero, 0};
  int basis_dim = 10;
  bool hierarchical = false;
  bool gender_additive = false;
  bool estimate_lambda_male = false;
  std::optional<TrendMatrix> inc_trend;
  std::optional<TrendMatrix> cf_trend;
  /// Hyperparameters pinned at a value: lambda_cf, lambda_inc, lambda_rem,
  /// lambda1 (between-area sd), lambda_cf_male.
  std::map<std::string, double> hp_fixed;
  PriorSettings prior;
  Occupancy<double> s0 = disease_free_at_birth();

  bool has_trends() const { return inc_trend.has_value() || cf_trend.has_value(); }
};

/// Hyperparameter names accepted by hp_fixed, and the parameter block that
/// each one replaces.
const std::map<std::string, std::string>& hyperparameter_blocks();

/// Named contiguous blocks of the unconstrained parameter vector.
class ParamLayout {
 public:
  struct Block {
    std::string name;
    int offset = 0;
    int size = 0;
  };

  void add(std::string name, int size);
  bool has(const std::string& name) const;
  const Block& block(const std::string& name) const;
  const std::vector<Block>& blocks() const { return blocks_; }
  int size() const { return size_; }
  /// One label per scalar parameter, e.g. "cf_beta[3]".
  std::vector<std::string> labels() const;

  std::map<std::string, Eigen::VectorXd> unpack(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd pack(const std::map<std::string, Eigen::VectorXd>& values) const;

 private:
  std::vector<Block> blocks_;
  int size_ = 0;
};

/// Identifies one binomial observation: outcome count at an age in a group.
struct ObservationKey {
  Outcome outcome = Outcome::Mort;
  int age = 0;
  int group = 0;
  auto operator<=>(const ObservationKey&) const = default;
};

/// Per-age rates and the model-implied probabilities for one group.
struct GroupQuantities {
  Eigen::VectorXd inc, cf, rem;            // rates
  Eigen::VectorXd prev, mort, inc_prob, rem_prob;  // probabilities
};

/// Generalized binomial log-density, valid for fractional y and n.
double binomial_logpdf(double y, double n, double p);

inline constexpr double kProbFloor = 1e-12;

class Model {
 public:
  Model(Dataset data, ModelSpec spec);

  const Dataset& data() const { return data_; }
  const ModelSpec& spec() const { return spec_; }
  const SplineBasis& basis() const { return basis_; }
  const ParamLayout& layout() const { return layout_; }
  int dim() const { return layout_.size(); }

  double log_likelihood(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const;
  double log_prior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const;
  /// Unnormalized log posterior on the unconstrained scale. Returns -inf in
  /// regions where the implied rates overflow.
  double log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const;

  /// Rates per group, before any probabilities are formed.
  std::vector<GroupQuantities> rates(const Eigen::VectorXd& theta) const;
  /// Rates plus model-implied probabilities (data-year values under trends).
  std::vector<GroupQuantities> quantities(const Eigen::VectorXd& theta) const;

  const std::vector<ObservationKey>& observations() const { return observations_; }
  /// Log-density of each observation in observations() order.
  Eigen::VectorXd pointwise_log_likelihood(const Eigen::VectorXd& theta) const;

  /// Deterministic starting point built from crude per-age data summaries.
  Eigen::VectorXd initial_point() const;

  std::vector<std::string> free_hyperparameters() const;

 private:
  struct CurveSlot;
  void build_layout();
  double curve_prior(const CurveSlot& slot, const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const;

  Dataset data_;
  ModelSpec spec_;
  SplineBasis basis_;
  ParamLayout layout_;
  std::vector<ObservationKey> observations_;
  std::array<Eigen::MatrixXd, 3> clamped_basis_;  // cf, inc, rem (rows below eqage repeat eqage)
};

// Free-function forms of the model API.
double log_likelihood(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec);
double log_prior(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec);
double log_posterior(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec,
                     Eigen::VectorXd* grad = nullptr);

/// Gamma prior for the between-area sd of log case fatality such that the
/// mean is ln(ratio_guess)/3.92 and the 97.5% quantile is ln(ratio_upper)/3.92.
/// The 3.92 converts a 2.5%-97.5% spread of a normal into its sd.
GammaPrior elicit_lambda1_prior(double ratio_guess, double ratio_upper);

}  // namespace illdeath
