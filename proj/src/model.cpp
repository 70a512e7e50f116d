#include "illdeath/model.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/tools/roots.hpp>
#include <unsupported/Eigen/AutoDiff>

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace illdeath {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kNormalQuantile975Width = 3.92;

enum RateIndex { kCf = 0, kInc = 1, kRem = 2 };
constexpr std::array<const char*, 3> kRatePrefix{"cf", "inc", "rem"};

double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -kHalfLog2Pi - std::log(sd) - 0.5 * z * z;
}

/// Gamma(shape, rate) on exp(log_x), including the log-Jacobian of the
/// log transform. Adds d/d(log_x) to *grad when given.
double log_gamma_prior(double log_x, const GammaPrior& prior, double* grad) {
  const double x = std::exp(log_x);
  if (grad) *grad += prior.shape - prior.rate * x;
  return prior.shape * std::log(prior.rate) - std::lgamma(prior.shape) +
         prior.shape * log_x - prior.rate * x;
}

const RateModel& rate_model(const ModelSpec& spec, int rate) {
  switch (rate) {
    case kCf: return spec.cf;
    case kInc: return spec.inc;
    default: return spec.rem;
  }
}

std::string hp_name(int rate) { return std::string("lambda_") + kRatePrefix[rate]; }

using Dual = Eigen::AutoDiffScalar<Eigen::Vector3d>;

/// Transition matrix with its derivatives with respect to (inc, cf, rem).
struct TransitionJet {
  Eigen::Matrix3d p;
  std::array<Eigen::Matrix3d, 3> d;
};

TransitionJet transition_jet(double inc, double cf, double rem) {
  const RateTriple<Dual> rates{Dual(inc, 3, 0), Dual(cf, 3, 1), Dual(rem, 3, 2)};
  const TransitionMatrix<Dual> p = transition_matrix(rates);
  TransitionJet jet;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      jet.p(r, c) = p(r, c).value();
      for (int k = 0; k < 3; ++k) jet.d[k](r, c) = p(r, c).derivatives()(k);
    }
  }
  return jet;
}

/// d/dp of binomial_logpdf, zero where the probability is clamped.
double binomial_dlogpdf(double y, double n, double p) {
  if (n <= 0 || p <= kProbFloor || p >= 1 - kProbFloor) return 0.0;
  return y / p - (n - y) / (1 - p);
}

struct RateGrad {
  Eigen::VectorXd inc, cf, rem;
};

/// Per-age contributions for one group's outcomes at one age given the
/// implied probabilities. Returns the log-likelihood and fills the
/// derivatives with respect to (prevalence, P(0,0), P(0,2), P(1,0), P(1,2)).
struct AgeTerms {
  double value = 0;
  double d_prev = 0;
  Eigen::Matrix3d d_p = Eigen::Matrix3d::Zero();
};

AgeTerms age_terms(const ObservedCounts& data, int age, const Eigen::Matrix3d& p, double prev,
                   std::vector<double>* pointwise_by_outcome) {
  AgeTerms t;
  for (Outcome o : kOutcomes) {
    if (!data.has(o)) continue;
    const CountSeries& s = data.get(o);
    const double y = s.y(age);
    const double n = s.n(age);
    double prob = 0;
    switch (o) {
      case Outcome::Inc: prob = incidence_probability<double>(p); break;
      case Outcome::Prev: prob = prev; break;
      case Outcome::Mort: prob = mortality_probability<double>(p, prev); break;
      case Outcome::Rem: prob = p(1, 0); break;
    }
    const double lp = binomial_logpdf(y, n, prob);
    t.value += lp;
    if (pointwise_by_outcome) pointwise_by_outcome[static_cast<int>(o)].push_back(lp);
    const double dl = binomial_dlogpdf(y, n, prob);
    if (dl == 0) continue;
    switch (o) {
      case Outcome::Inc: t.d_p(0, 0) -= dl; break;
      case Outcome::Prev: t.d_prev += dl; break;
      case Outcome::Mort:
        t.d_p(1, 2) += dl * prev;
        t.d_p(0, 2) += dl * (1 - prev);
        t.d_prev += dl * (p(1, 2) - p(0, 2));
        break;
      case Outcome::Rem: t.d_p(1, 0) += dl; break;
    }
  }
  return t;
}

Eigen::RowVector3d prevalence_gradient(const Occupancy<double>& s, double d_prev) {
  const double alive = s(0) + s(1);
  return Eigen::RowVector3d(-d_prev * s(1) / (alive * alive), d_prev * s(0) / (alive * alive), 0.0);
}

double contract(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  return (a.array() * b.array()).sum();
}

void add_rate_grad(RateGrad& g, int age, const Eigen::Matrix3d& g_p, const TransitionJet& jet,
                   double inc_scale, double cf_scale) {
  g.inc(age) += inc_scale * contract(g_p, jet.d[0]);
  g.cf(age) += cf_scale * contract(g_p, jet.d[1]);
  g.rem(age) += contract(g_p, jet.d[2]);
}

/// Log-likelihood of one group's data given its per-age rates, with the
/// reverse-mode derivative with respect to each rate when `grad` is given.
/// Observation-level values go to `pointwise` and the implied probabilities
/// to `quantities`.
double group_kernel(const GroupQuantities& rates, const ObservedCounts& data,
                    const Occupancy<double>& s0, const TrendMatrix* inc_trend,
                    const TrendMatrix* cf_trend, RateGrad* grad, std::vector<double>* pointwise,
                    GroupQuantities* quantities) {
  const int n_ages = static_cast<int>(rates.inc.size());
  const bool trended = inc_trend != nullptr;
  if (grad) {
    grad->inc = Eigen::VectorXd::Zero(n_ages);
    grad->cf = Eigen::VectorXd::Zero(n_ages);
    grad->rem = Eigen::VectorXd::Zero(n_ages);
  }
  std::array<std::vector<double>, 4> by_outcome;
  std::vector<double>* by_outcome_ptr = pointwise ? by_outcome.data() : nullptr;
  if (quantities) {
    *quantities = rates;
    quantities->prev.resize(n_ages);
    quantities->mort.resize(n_ages);
    quantities->inc_prob.resize(n_ages);
    quantities->rem_prob.resize(n_ages);
  }

  auto jet_at = [&](int age, int year) {
    const double ri = trended ? (*inc_trend)(age, year) : 1.0;
    const double rf = trended ? (*cf_trend)(age, year) : 1.0;
    if (grad) return transition_jet(rates.inc(age) * ri, rates.cf(age) * rf, rates.rem(age));
    TransitionJet jet;
    jet.p = transition_matrix(RateTriple<double>{rates.inc(age) * ri, rates.cf(age) * rf, rates.rem(age)});
    return jet;
  };
  auto record = [&](int age, const Eigen::Matrix3d& p, double prev) {
    if (!quantities) return;
    quantities->prev(age) = prev;
    quantities->mort(age) = mortality_probability<double>(p, prev);
    quantities->inc_prob(age) = incidence_probability<double>(p);
    quantities->rem_prob(age) = p(1, 0);
  };

  double total = 0;
  if (!trended) {
    std::vector<TransitionJet> jets(n_ages);
    std::vector<Occupancy<double>> occ(n_ages);
    std::vector<AgeTerms> terms(n_ages);
    occ[0] = s0;
    for (int a = 0; a < n_ages; ++a) {
      jets[a] = jet_at(a, kDataYear);
      if (a + 1 < n_ages) occ[a + 1] = occ[a] * jets[a].p;
      const double alive = occ[a](0) + occ[a](1);
      if (!(alive > 0)) return kNegInf;
      const double prev = occ[a](1) / alive;
      terms[a] = age_terms(data, a, jets[a].p, prev, by_outcome_ptr);
      total += terms[a].value;
      record(a, jets[a].p, prev);
    }
    if (grad) {
      Eigen::RowVector3d g_next = Eigen::RowVector3d::Zero();
      for (int a = n_ages - 1; a >= 0; --a) {
        Eigen::Matrix3d g_p = terms[a].d_p;
        Eigen::RowVector3d g_s = prevalence_gradient(occ[a], terms[a].d_prev);
        if (a + 1 < n_ages) {
          g_p += occ[a].transpose() * g_next;
          g_s += g_next * jets[a].p.transpose();
        }
        add_rate_grad(*grad, a, g_p, jets[a], 1.0, 1.0);
        g_next = g_s;
      }
    }
  } else {
    std::vector<TransitionJet> diag;
    std::vector<Occupancy<double>> occ;
    for (int a = 0; a < n_ages; ++a) {
      const int birth_year = kDataYear - a;
      diag.resize(a);
      occ.resize(a + 1);
      occ[0] = s0;
      for (int b = 0; b < a; ++b) {
        diag[b] = jet_at(b, birth_year + b);
        occ[b + 1] = occ[b] * diag[b].p;
      }
      const TransitionJet now = jet_at(a, kDataYear);
      const double alive = occ[a](0) + occ[a](1);
      if (!(alive > 0)) return kNegInf;
      const double prev = occ[a](1) / alive;
      const AgeTerms t = age_terms(data, a, now.p, prev, by_outcome_ptr);
      total += t.value;
      record(a, now.p, prev);
      if (grad) {
        add_rate_grad(*grad, a, t.d_p, now, (*inc_trend)(a, kDataYear), (*cf_trend)(a, kDataYear));
        Eigen::RowVector3d g_s = prevalence_gradient(occ[a], t.d_prev);
        for (int b = a - 1; b >= 0; --b) {
          const Eigen::Matrix3d g_p = occ[b].transpose() * g_s;
          g_s = (g_s * diag[b].p.transpose()).eval();
          add_rate_grad(*grad, b, g_p, diag[b], (*inc_trend)(b, birth_year + b),
                        (*cf_trend)(b, birth_year + b));
        }
      }
    }
  }
  if (pointwise) {
    for (Outcome o : kOutcomes) {
      if (!data.has(o)) continue;
      const CountSeries& s = data.get(o);
      const auto& vals = by_outcome[static_cast<int>(o)];
      for (int a = 0; a < n_ages; ++a) {
        if (s.n(a) > 0) pointwise->push_back(vals[a]);
      }
    }
  }
  return total;
}

bool rates_usable(const GroupQuantities& q) {
  auto ok = [](const Eigen::VectorXd& v) {
    return v.size() == 0 || (v.allFinite() && v.maxCoeff() < 1e8 && v.minCoeff() >= 0);
  };
  return ok(q.inc) && ok(q.cf) && ok(q.rem);
}

/// Weighted least-squares line in x in [-1, 1], with the log rate at both
/// ends kept within [log 1e-6, 0] so crude data cannot give wild starts.
std::pair<double, double> weighted_line(const std::vector<double>& x, const std::vector<double>& v,
                                        const std::vector<double>& w, double fallback) {
  const double lo = std::log(1e-6), hi = 0.0;
  if (x.size() < 2) return {std::clamp(x.empty() ? fallback : v[0], lo, hi), 0.0};
  Eigen::Matrix2d xtx = Eigen::Matrix2d::Zero();
  Eigen::Vector2d xty = Eigen::Vector2d::Zero();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const Eigen::Vector2d row(1.0, x[k]);
    xtx += w[k] * row * row.transpose();
    xty += w[k] * row * v[k];
  }
  if (std::abs(xtx.determinant()) < 1e-12) return {std::clamp(xty(0) / xtx(0, 0), lo, hi), 0.0};
  const Eigen::Vector2d coef = xtx.ldlt().solve(xty);
  const double left = std::clamp(coef(0) - coef(1), lo, hi);
  const double right = std::clamp(coef(0) + coef(1), lo, hi);
  return {(left + right) / 2, (right - left) / 2};
}

}  // namespace

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::Inc: return "inc";
    case Outcome::Prev: return "prev";
    case Outcome::Mort: return "mort";
    case Outcome::Rem: return "rem";
  }
  return "?";
}

Outcome parse_outcome(std::string_view name) {
  if (name == "inc") return Outcome::Inc;
  if (name == "prev") return Outcome::Prev;
  if (name == "mort") return Outcome::Mort;
  if (name == "rem") return Outcome::Rem;
  throw std::invalid_argument("unknown outcome '" + std::string(name) + "'");
}

CountSeries& ObservedCounts::set(Outcome o, Eigen::VectorXd y, Eigen::VectorXd n) {
  auto& slot = series[static_cast<int>(o)];
  slot = CountSeries{std::move(y), std::move(n)};
  return *slot;
}

void ObservedCounts::validate() const {
  if (max_age < 0) throw std::invalid_argument("counts: negative maximum age");
  if (!has(Outcome::Mort)) throw std::invalid_argument("counts: mortality data are required");
  if (!has(Outcome::Inc) && !has(Outcome::Prev)) {
    throw std::invalid_argument("counts: incidence or prevalence data are required");
  }
  for (Outcome o : kOutcomes) {
    if (!has(o)) continue;
    const CountSeries& s = get(o);
    if (s.y.size() != max_age + 1 || s.n.size() != max_age + 1) {
      throw std::invalid_argument("counts: " + to_string(o) + " series must cover ages 0.." +
                                  std::to_string(max_age));
    }
    for (int a = 0; a <= max_age; ++a) {
      if (!std::isfinite(s.y(a)) || !std::isfinite(s.n(a)) || s.y(a) < 0 || s.n(a) < 0 ||
          s.y(a) > s.n(a) * (1 + 1e-12)) {
        throw std::invalid_argument("counts: " + to_string(o) + " at age " + std::to_string(a) +
                                    " needs 0 <= num <= denom");
      }
    }
  }
}

Dataset single_group(ObservedCounts counts) {
  Dataset d;
  d.groups.push_back(GroupData{0, 0, std::move(counts)});
  return d;
}

PriorSettings::PriorSettings() : area_sd(elicit_lambda1_prior(5.0, 50.0)) {}

const std::map<std::string, std::string>& hyperparameter_blocks() {
  static const std::map<std::string, std::string> blocks{
      {"lambda_cf", "cf_log_lambda"},
      {"lambda_inc", "inc_log_lambda"},
      {"lambda_rem", "rem_log_lambda"},
      {"lambda1", "cf_log_lambda1"},
      {"lambda_cf_male", "cf_log_lambda_male"},
  };
  return blocks;
}

void ParamLayout::add(std::string name, int size) {
  if (size <= 0) return;
  if (has(name)) throw std::logic_error("duplicate parameter block " + name);
  blocks_.push_back(Block{std::move(name), size_, size});
  size_ += size;
}

bool ParamLayout::has(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return true;
  }
  return false;
}

const ParamLayout::Block& ParamLayout::block(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw std::out_of_range("no parameter block named " + name);
}

std::vector<std::string> ParamLayout::labels() const {
  std::vector<std::string> out;
  out.reserve(size_);
  for (const auto& b : blocks_) {
    for (int k = 0; k < b.size; ++k) {
      out.push_back(b.size == 1 ? b.name : b.name + "[" + std::to_string(k) + "]");
    }
  }
  return out;
}

std::map<std::string, Eigen::VectorXd> ParamLayout::unpack(const Eigen::VectorXd& theta) const {
  if (theta.size() != size_) throw std::invalid_argument("unpack: parameter vector has wrong length");
  std::map<std::string, Eigen::VectorXd> out;
  for (const auto& b : blocks_) out[b.name] = theta.segment(b.offset, b.size);
  return out;
}

Eigen::VectorXd ParamLayout::pack(const std::map<std::string, Eigen::VectorXd>& values) const {
  Eigen::VectorXd theta(size_);
  for (const auto& b : blocks_) {
    auto it = values.find(b.name);
    if (it == values.end() || it->second.size() != b.size) {
      throw std::invalid_argument("pack: missing or mis-sized block " + b.name);
    }
    theta.segment(b.offset, b.size) = it->second;
  }
  if (values.size() != blocks_.size()) throw std::invalid_argument("pack: unknown blocks supplied");
  return theta;
}

double binomial_logpdf(double y, double n, double p) {
  if (n <= 0) return 0.0;
  p = std::clamp(p, kProbFloor, 1 - kProbFloor);
  return y * std::log(p) + (n - y) * std::log1p(-p) + std::lgamma(n + 1) - std::lgamma(y + 1) -
         std::lgamma(n - y + 1);
}

GammaPrior elicit_lambda1_prior(double ratio_guess, double ratio_upper) {
  if (!(ratio_guess > 1 && ratio_upper > ratio_guess)) {
    throw std::invalid_argument("elicit_lambda1_prior: need 1 < ratio_guess < ratio_upper");
  }
  const double mean = std::log(ratio_guess) / kNormalQuantile975Width;
  const double upper = std::log(ratio_upper) / kNormalQuantile975Width;
  // With rate = shape / mean, the 97.5% quantile is mean * P^{-1}(shape, .975) / shape.
  // This ratio tends to 1 for large shapes and to 0 for tiny ones; the root on
  // the decreasing branch is the one wanted.
  auto excess = [&](double log_shape) {
    const double shape = std::exp(log_shape);
    return mean * boost::math::gamma_p_inv(shape, 0.975) / shape - upper;
  };
  double hi = std::log(1e7);
  double lo = hi;
  while (excess(lo) < 0 && lo > std::log(1e-3)) lo -= 0.5;
  if (excess(lo) < 0 || excess(hi) > 0) {
    throw std::runtime_error("elicit_lambda1_prior: no gamma distribution matches the targets");
  }
  hi = lo + 0.5;
  std::uintmax_t max_iter = 200;
  auto [a, b] = boost::math::tools::toms748_solve(
      excess, lo, hi, boost::math::tools::eps_tolerance<double>(50), max_iter);
  if (max_iter >= 200) throw std::runtime_error("elicit_lambda1_prior: search did not converge");
  const double shape = std::exp(0.5 * (a + b));
  return GammaPrior{shape, shape / mean};
}

// ---------------------------------------------------------------------------
// Model

struct Model::CurveSlot {
  int rate;
  int n_curves;
};

Model::Model(Dataset data, ModelSpec spec) : data_(std::move(data)), spec_(std::move(spec)) {
  if (data_.groups.empty()) throw std::invalid_argument("model: no data");
  const int max_age = data_.max_age();
  for (const auto& g : data_.groups) {
    if (g.counts.max_age != max_age) throw std::invalid_argument("model: groups cover different ages");
    if (g.area < 0 || g.area >= data_.n_areas() || g.gender < 0 || g.gender >= data_.n_genders()) {
      throw std::invalid_argument("model: group has an out-of-range area or gender index");
    }
    g.counts.validate();
    if (spec_.rem.family == CurveFamily::Zero && g.counts.has(Outcome::Rem)) {
      throw std::invalid_argument("model: remission data supplied but the remission model is 'zero'");
    }
  }
  if (spec_.hierarchical) {
    if (data_.n_areas() < 2) throw std::invalid_argument("model: a hierarchical model needs >= 2 areas");
    if (spec_.cf.family != CurveFamily::Smooth) {
      throw std::invalid_argument("model: hierarchical case fatality must use the smooth family");
    }
    if (spec_.has_trends()) {
      throw std::invalid_argument("model: time trends are only supported without the area hierarchy");
    }
  } else if (data_.groups.size() != 1) {
    throw std::invalid_argument("model: non-hierarchical models describe a single group; fit groups separately");
  }
  if (spec_.gender_additive) {
    if (!spec_.hierarchical) throw std::invalid_argument("model: additive gender effects need the hierarchy");
    if (data_.n_genders() != 2) throw std::invalid_argument("model: additive gender effects need two genders");
  }
  for (const auto& [name, value] : spec_.hp_fixed) {
    if (!hyperparameter_blocks().contains(name)) {
      throw std::invalid_argument("model: '" + name + "' is not a hyperparameter");
    }
    if (!(value > 0) || !std::isfinite(value)) {
      throw std::invalid_argument("model: fixed hyperparameter " + name + " must be positive");
    }
  }
  if (spec_.has_trends()) {
    const std::size_t n_ages = static_cast<std::size_t>(max_age) + 1;
    for (auto* trend : {&spec_.inc_trend, &spec_.cf_trend}) {
      if (!trend->has_value()) *trend = TrendMatrix::Ones(max_age + 1, kDataYear + 1);
      check_trend_dims(**trend, n_ages, "model");
      if (!((*trend)->minCoeff() > 0) || !(*trend)->allFinite()) {
        throw std::invalid_argument("model: trend ratios must be positive");
      }
      if (!(*trend)->col(kDataYear).isOnes(0.0)) {
        throw std::invalid_argument("model: trend ratios in the data year must equal 1");
      }
    }
  }
  bool needs_basis = false;
  for (int r = 0; r < 3; ++r) {
    const RateModel& rm = rate_model(spec_, r);
    if (rm.eqage < 0 || rm.eqage > max_age) throw std::invalid_argument("model: eqage outside the age range");
    needs_basis |= rm.family == CurveFamily::Smooth || rm.family == CurveFamily::Increasing;
  }
  if (needs_basis) {
    basis_ = build_basis(max_age, spec_.basis_dim);
    for (int r = 0; r < 3; ++r) {
      const int eqage = rate_model(spec_, r).eqage;
      clamped_basis_[r] = basis_.g;
      for (int a = 0; a < eqage; ++a) clamped_basis_[r].row(a) = basis_.g.row(eqage);
    }
  }
  build_layout();

  for (int g = 0; g < static_cast<int>(data_.groups.size()); ++g) {
    const ObservedCounts& c = data_.groups[g].counts;
    for (Outcome o : kOutcomes) {
      if (!c.has(o)) continue;
      for (int a = 0; a <= max_age; ++a) {
        if (c.get(o).n(a) > 0) observations_.push_back(ObservationKey{o, a, g});
      }
    }
  }
}

void Model::build_layout() {
  const int k = spec_.basis_dim;
  const int n_ages = data_.max_age() + 1;
  const int n_groups = static_cast<int>(data_.groups.size());
  auto add_curve = [&](int rate, int n_curves) {
    const std::string p = kRatePrefix[rate];
    const bool lambda_free = !spec_.hp_fixed.contains(hp_name(rate));
    switch (rate_model(spec_, rate).family) {
      case CurveFamily::Smooth:
        layout_.add(p + "_beta", n_curves * k);
        if (lambda_free) layout_.add(p + "_log_lambda", 1);
        break;
      case CurveFamily::Increasing:
        layout_.add(p + "_base", n_curves);
        layout_.add(p + "_beta", n_curves * k);
        if (lambda_free) layout_.add(p + "_log_lambda", 1);
        break;
      case CurveFamily::Constant: layout_.add(p + "_lograte", n_curves); break;
      case CurveFamily::Indep: layout_.add(p + "_lograte", n_curves * n_ages); break;
      case CurveFamily::Zero: break;
    }
  };
  if (spec_.hierarchical) {
    layout_.add("cf_b1", 1);
    layout_.add("cf_b2", 1);
    if (!spec_.hp_fixed.contains("lambda1")) layout_.add("cf_log_lambda1", 1);
    layout_.add("cf_area_z", data_.n_areas());
    layout_.add("cf_area_nl", data_.n_areas() * (k - 2));
    if (!spec_.hp_fixed.contains("lambda_cf")) layout_.add("cf_log_lambda", 1);
    if (spec_.gender_additive) {
      layout_.add("cf_male", k);
      if (spec_.estimate_lambda_male && !spec_.hp_fixed.contains("lambda_cf_male")) {
        layout_.add("cf_log_lambda_male", 1);
      }
    }
    add_curve(kInc, n_groups);
  } else {
    add_curve(kCf, 1);
    add_curve(kInc, 1);
  }
  add_curve(kRem, 1);
}

std::vector<std::string> Model::free_hyperparameters() const {
  std::vector<std::string> out;
  for (const auto& [name, block] : hyperparameter_blocks()) {
    if (layout_.has(block)) out.push_back(name);
  }
  return out;
}

namespace {

/// Parameter access helpers bound to one model evaluation.
struct ThetaView {
  const ParamLayout& layout;
  const Eigen::VectorXd& theta;
  const ModelSpec& spec;

  Eigen::Ref<const Eigen::VectorXd> seg(const std::string& name) const {
    const auto& b = layout.block(name);
    return theta.segment(b.offset, b.size);
  }
  double hyper(const std::string& hp, const std::string& block, double fallback) const {
    if (layout.has(block)) return std::exp(theta(layout.block(block).offset));
    auto it = spec.hp_fixed.find(hp);
    return it != spec.hp_fixed.end() ? it->second : fallback;
  }
  /// Spline coefficients of curve c: intercept and slope as stored, the
  /// nonlinear terms stored in standardized form and scaled by lambda.
  Eigen::VectorXd coefficients(int rate, int c, int k) const {
    const std::string p = kRatePrefix[rate];
    Eigen::VectorXd beta = seg(p + "_beta").segment(c * k, k);
    beta.tail(k - 2) *= hyper(hp_name(rate), p + "_log_lambda", 1.0);
    return beta;
  }
};

/// Adds the gradient with respect to spline coefficients beta = (b0, b1,
/// lambda * z) to the stored (b0, b1, z) and, when free, to log lambda.
void add_scaled_gradient(Eigen::VectorXd& grad, int offset, const Eigen::VectorXd& theta, const Eigen::VectorXd& g_beta,
                         double lambda, int log_lambda_at, int n_linear) {
  const int k = static_cast<int>(g_beta.size());
  grad.segment(offset, n_linear) += g_beta.head(n_linear);
  grad.segment(offset + n_linear, k - n_linear) += lambda * g_beta.tail(k - n_linear);
  if (log_lambda_at >= 0) {
    grad(log_lambda_at) += lambda * theta.segment(offset + n_linear, k - n_linear).dot(g_beta.tail(k - n_linear));
  }
}

}  // namespace

std::vector<GroupQuantities> Model::rates(const Eigen::VectorXd& theta) const {
  if (theta.size() != dim()) throw std::invalid_argument("model: parameter vector has wrong length");
  const ThetaView v{layout_, theta, spec_};
  const int n_ages = data_.max_age() + 1;
  const int k = spec_.basis_dim;

  auto curve = [&](int rate, int c) -> Eigen::VectorXd {
    const std::string p = kRatePrefix[rate];
    const RateModel& rm = rate_model(spec_, rate);
    switch (rm.family) {
      case CurveFamily::Smooth:
        return (clamped_basis_[rate] * v.coefficients(rate, c, k)).array().exp();
      case CurveFamily::Increasing:
        return increasing_rate_curve(v.seg(p + "_base")(c), v.coefficients(rate, c, k), rm.eqage, basis_);
      case CurveFamily::Constant:
        return Eigen::VectorXd::Constant(n_ages, std::exp(v.seg(p + "_lograte")(c)));
      case CurveFamily::Indep:
        return v.seg(p + "_lograte").segment(c * n_ages, n_ages).array().exp();
      case CurveFamily::Zero: return Eigen::VectorXd::Zero(n_ages);
    }
    return {};
  };

  std::vector<GroupQuantities> out(data_.groups.size());
  const Eigen::VectorXd rem = curve(kRem, 0);
  for (std::size_t g = 0; g < data_.groups.size(); ++g) {
    const GroupData& gd = data_.groups[g];
    if (spec_.hierarchical) {
      const double lambda1 = v.hyper("lambda1", "cf_log_lambda1", 1.0);
      Eigen::VectorXd beta(k);
      beta(0) = v.seg("cf_b1")(0) + lambda1 * v.seg("cf_area_z")(gd.area);
      beta(1) = v.seg("cf_b2")(0);
      beta.tail(k - 2) = v.hyper("lambda_cf", "cf_log_lambda", 1.0) * v.seg("cf_area_nl").segment(gd.area * (k - 2), k - 2);
      if (spec_.gender_additive && gd.gender == 1) {
        const Eigen::VectorXd male = v.seg("cf_male");
        beta.head(2) += male.head(2);
        beta.tail(k - 2) += v.hyper("lambda_cf_male", "cf_log_lambda_male", 1.0) * male.tail(k - 2);
      }
      out[g].cf = (clamped_basis_[kCf] * beta).array().exp();
      out[g].inc = curve(kInc, static_cast<int>(g));
    } else {
      out[g].cf = curve(kCf, 0);
      out[g].inc = curve(kInc, 0);
    }
    out[g].rem = rem;
  }
  return out;
}

double Model::log_likelihood(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  const std::vector<GroupQuantities> r = rates(theta);
  const TrendMatrix* inc_trend = spec_.has_trends() ? &*spec_.inc_trend : nullptr;
  const TrendMatrix* cf_trend = spec_.has_trends() ? &*spec_.cf_trend : nullptr;
  if (grad) grad->setZero(dim());
  double total = 0;
  for (std::size_t g = 0; g < r.size(); ++g) {
    if (!rates_usable(r[g])) return kNegInf;
    RateGrad rg;
    const double value = group_kernel(r[g], data_.groups[g].counts, spec_.s0, inc_trend, cf_trend,
                                      grad ? &rg : nullptr, nullptr, nullptr);
    if (!std::isfinite(value)) return kNegInf;
    total += value;
    if (!grad) continue;

    // Back-propagate d/d(rate) into the parameters.
    const ThetaView v{layout_, theta, spec_};
    const int k = spec_.basis_dim;
    const int n_ages = static_cast<int>(r[g].inc.size());
    auto log_lambda_at = [&](int rate) {
      const std::string name = std::string(kRatePrefix[rate]) + "_log_lambda";
      return layout_.has(name) ? layout_.block(name).offset : -1;
    };
    auto backprop = [&](int rate, int c, const Eigen::VectorXd& rate_vals, const Eigen::VectorXd& g_rate) {
      const std::string p = kRatePrefix[rate];
      const RateModel& rm = rate_model(spec_, rate);
      switch (rm.family) {
        case CurveFamily::Smooth: {
          const Eigen::VectorXd g_beta =
              clamped_basis_[rate].transpose() * (g_rate.array() * rate_vals.array()).matrix();
          add_scaled_gradient(*grad, layout_.block(p + "_beta").offset + c * k, theta, g_beta,
                              v.hyper(hp_name(rate), p + "_log_lambda", 1.0), log_lambda_at(rate), 2);
          break;
        }
        case CurveFamily::Increasing: {
          const auto& bb = layout_.block(p + "_base");
          const Eigen::VectorXd beta = v.coefficients(rate, c, k);
          const int clamp = std::min(rm.eqage, n_ages - 1);
          (*grad)(bb.offset + c) += std::exp(theta(bb.offset + c)) * g_rate.sum();
          Eigen::VectorXd g_beta = Eigen::VectorXd::Zero(k);
          double tail = 0;
          for (int a = n_ages - 1; a > clamp; --a) {
            tail += g_rate(a);
            const double inc = kIncrementScale * std::exp(basis_.g.row(a).dot(beta));
            g_beta += tail * inc * basis_.g.row(a).transpose();
          }
          add_scaled_gradient(*grad, layout_.block(p + "_beta").offset + c * k, theta, g_beta,
                              v.hyper(hp_name(rate), p + "_log_lambda", 1.0), log_lambda_at(rate), 2);
          break;
        }
        case CurveFamily::Constant:
          (*grad)(layout_.block(p + "_lograte").offset + c) += (g_rate.array() * rate_vals.array()).sum();
          break;
        case CurveFamily::Indep:
          grad->segment(layout_.block(p + "_lograte").offset + c * n_ages, n_ages) +=
              (g_rate.array() * rate_vals.array()).matrix();
          break;
        case CurveFamily::Zero: break;
      }
    };
    backprop(kRem, 0, r[g].rem, rg.rem);
    if (spec_.hierarchical) {
      const GroupData& gd = data_.groups[g];
      backprop(kInc, static_cast<int>(g), r[g].inc, rg.inc);
      const Eigen::VectorXd g_beta =
          clamped_basis_[kCf].transpose() * (rg.cf.array() * r[g].cf.array()).matrix();
      const double lambda1 = v.hyper("lambda1", "cf_log_lambda1", 1.0);
      (*grad)(layout_.block("cf_b1").offset) += g_beta(0);
      (*grad)(layout_.block("cf_area_z").offset + gd.area) += lambda1 * g_beta(0);
      if (layout_.has("cf_log_lambda1")) {
        (*grad)(layout_.block("cf_log_lambda1").offset) += lambda1 * v.seg("cf_area_z")(gd.area) * g_beta(0);
      }
      (*grad)(layout_.block("cf_b2").offset) += g_beta(1);
      add_scaled_gradient(*grad, layout_.block("cf_area_nl").offset + gd.area * (k - 2), theta, g_beta.tail(k - 2),
                          v.hyper("lambda_cf", "cf_log_lambda", 1.0), log_lambda_at(kCf), 0);
      if (spec_.gender_additive && gd.gender == 1) {
        const int male_at = layout_.has("cf_log_lambda_male") ? layout_.block("cf_log_lambda_male").offset : -1;
        add_scaled_gradient(*grad, layout_.block("cf_male").offset, theta, g_beta,
                            v.hyper("lambda_cf_male", "cf_log_lambda_male", 1.0), male_at, 2);
      }
    } else {
      backprop(kCf, 0, r[g].cf, rg.cf);
      backprop(kInc, 0, r[g].inc, rg.inc);
    }
  }
  return total;
}

double Model::curve_prior(const CurveSlot& slot, const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  const PriorSettings& pr = spec_.prior;
  const std::string p = kRatePrefix[slot.rate];
  const RateModel& rm = rate_model(spec_, slot.rate);
  const int k = spec_.basis_dim;
  double lp = 0;
  auto normal_block = [&](const std::string& name, double mean, double sd) {
    const auto& b = layout_.block(name);
    for (int j = 0; j < b.size; ++j) {
      const double x = theta(b.offset + j);
      lp += normal_logpdf(x, mean, sd);
      if (grad) (*grad)(b.offset + j) -= (x - mean) / (sd * sd);
    }
  };
  switch (rm.family) {
    case CurveFamily::Smooth:
    case CurveFamily::Increasing: {
      if (rm.family == CurveFamily::Increasing) normal_block(p + "_base", 0.0, pr.intercept_sd);
      // Nonlinear terms are stored as beta_k / lambda, hence N(0, 1).
      const auto& b = layout_.block(p + "_beta");
      for (int c = 0; c < slot.n_curves; ++c) {
        for (int j = 0; j < k; ++j) {
          const int at = b.offset + c * k + j;
          const double x = theta(at);
          const double sd = j == 0 ? pr.intercept_sd : j == 1 ? pr.slope_sd : 1.0;
          lp += normal_logpdf(x, 0.0, sd);
          if (grad) (*grad)(at) -= x / (sd * sd);
        }
      }
      if (layout_.has(p + "_log_lambda")) {
        const int lambda_at = layout_.block(p + "_log_lambda").offset;
        double g = 0;
        lp += log_gamma_prior(theta(lambda_at), pr.smoothness, &g);
        if (grad) (*grad)(lambda_at) += g;
      }
      break;
    }
    case CurveFamily::Constant:
      if (slot.rate == kRem) {
        normal_block(p + "_lograte", pr.rem_lograte_mean, pr.rem_lograte_sd);
      } else {
        normal_block(p + "_lograte", pr.const_lograte_mean, pr.const_lograte_sd);
      }
      break;
    case CurveFamily::Indep: normal_block(p + "_lograte", 0.0, pr.indep_lograte_sd); break;
    case CurveFamily::Zero: break;
  }
  return lp;
}

double Model::log_prior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  if (theta.size() != dim()) throw std::invalid_argument("model: parameter vector has wrong length");
  if (grad) grad->setZero(dim());
  const PriorSettings& pr = spec_.prior;
  const int k = spec_.basis_dim;
  const int n_groups = static_cast<int>(data_.groups.size());
  double lp = 0;
  auto normal_at = [&](int at, double mean, double sd) {
    const double x = theta(at);
    lp += normal_logpdf(x, mean, sd);
    if (grad) (*grad)(at) -= (x - mean) / (sd * sd);
  };
  auto standard_block = [&](int offset, int size) {
    for (int at = offset; at < offset + size; ++at) normal_at(at, 0.0, 1.0);
  };

  if (spec_.hierarchical) {
    normal_at(layout_.block("cf_b1").offset, pr.area_mean_intercept_mean, pr.area_mean_intercept_sd);
    normal_at(layout_.block("cf_b2").offset, pr.common_slope_mean, pr.common_slope_sd);
    if (layout_.has("cf_log_lambda1")) {
      const int at = layout_.block("cf_log_lambda1").offset;
      double g = 0;
      lp += log_gamma_prior(theta(at), pr.area_sd, &g);
      if (grad) (*grad)(at) += g;
    }
    // Area offsets and nonlinear terms are stored standardized.
    const auto& z = layout_.block("cf_area_z");
    standard_block(z.offset, z.size);
    const auto& nl = layout_.block("cf_area_nl");
    standard_block(nl.offset, nl.size);
    if (layout_.has("cf_log_lambda")) {
      const int lambda_at = layout_.block("cf_log_lambda").offset;
      double g = 0;
      lp += log_gamma_prior(theta(lambda_at), pr.smoothness, &g);
      if (grad) (*grad)(lambda_at) += g;
    }
    if (spec_.gender_additive) {
      const auto& male = layout_.block("cf_male");
      normal_at(male.offset, 0.0, pr.male_linear_sd);
      normal_at(male.offset + 1, 0.0, pr.male_linear_sd);
      standard_block(male.offset + 2, k - 2);
      if (layout_.has("cf_log_lambda_male")) {
        const int male_at = layout_.block("cf_log_lambda_male").offset;
        double g = 0;
        lp += log_gamma_prior(theta(male_at), pr.smoothness, &g);
        if (grad) (*grad)(male_at) += g;
      }
    }
    lp += curve_prior(CurveSlot{kInc, n_groups}, theta, grad);
  } else {
    lp += curve_prior(CurveSlot{kCf, 1}, theta, grad);
    lp += curve_prior(CurveSlot{kInc, 1}, theta, grad);
  }
  lp += curve_prior(CurveSlot{kRem, 1}, theta, grad);
  return lp;
}

double Model::log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  if (!theta.allFinite()) return kNegInf;
  Eigen::VectorXd g_prior;
  const double lp = log_prior(theta, grad ? &g_prior : nullptr);
  const double ll = log_likelihood(theta, grad);
  if (!std::isfinite(ll)) {
    if (grad) grad->setZero(dim());
    return kNegInf;
  }
  if (grad) *grad += g_prior;
  return lp + ll;
}

std::vector<GroupQuantities> Model::quantities(const Eigen::VectorXd& theta) const {
  std::vector<GroupQuantities> r = rates(theta);
  const TrendMatrix* inc_trend = spec_.has_trends() ? &*spec_.inc_trend : nullptr;
  const TrendMatrix* cf_trend = spec_.has_trends() ? &*spec_.cf_trend : nullptr;
  std::vector<GroupQuantities> out(r.size());
  for (std::size_t g = 0; g < r.size(); ++g) {
    group_kernel(r[g], data_.groups[g].counts, spec_.s0, inc_trend, cf_trend, nullptr, nullptr, &out[g]);
  }
  return out;
}

Eigen::VectorXd Model::pointwise_log_likelihood(const Eigen::VectorXd& theta) const {
  std::vector<GroupQuantities> r = rates(theta);
  const TrendMatrix* inc_trend = spec_.has_trends() ? &*spec_.inc_trend : nullptr;
  const TrendMatrix* cf_trend = spec_.has_trends() ? &*spec_.cf_trend : nullptr;
  std::vector<double> values;
  values.reserve(observations_.size());
  for (std::size_t g = 0; g < r.size(); ++g) {
    std::vector<double> pw;
    const double total = rates_usable(r[g])
                             ? group_kernel(r[g], data_.groups[g].counts, spec_.s0, inc_trend,
                                            cf_trend, nullptr, &pw, nullptr)
                             : kNegInf;
    if (!std::isfinite(total)) {
      // Fill with -inf for this group's observations.
      for (const auto& key : observations_) {
        if (key.group == static_cast<int>(g)) values.push_back(kNegInf);
      }
      continue;
    }
    values.insert(values.end(), pw.begin(), pw.end());
  }
  return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Eigen::VectorXd Model::initial_point() const {
  const int max_age = data_.max_age();
  const int n_ages = max_age + 1;
  const int k = spec_.basis_dim;
  const double half = max_age > 0 ? max_age / 2.0 : 1.0;

  struct Line {
    double intercept, slope;
  };
  auto proportion_line = [&](const ObservedCounts& c, Outcome o, double fallback) -> Line {
    std::vector<double> x, v, w;
    if (c.has(o)) {
      const CountSeries& s = c.get(o);
      for (int a = 0; a < n_ages; ++a) {
        if (s.n(a) <= 0 || s.y(a) <= 0 || s.y(a) >= s.n(a)) continue;
        x.push_back((a - half) / half);
        v.push_back(std::log(-std::log1p(-s.y(a) / s.n(a))));
        w.push_back(s.y(a));
      }
    }
    auto [i, sl] = weighted_line(x, v, w, std::log(fallback));
    return {i, sl};
  };
  auto cf_line = [&](const ObservedCounts& c) -> Line {
    std::vector<double> x, v, w;
    if (c.has(Outcome::Prev)) {
      const CountSeries& m = c.get(Outcome::Mort);
      const CountSeries& p = c.get(Outcome::Prev);
      for (int a = 0; a < n_ages; ++a) {
        if (m.n(a) <= 0 || p.n(a) <= 0 || m.y(a) <= 0 || p.y(a) <= 0) continue;
        const double ratio = (m.y(a) / m.n(a)) / (p.y(a) / p.n(a));
        if (!(ratio < 1)) continue;
        x.push_back((a - half) / half);
        v.push_back(std::log(-std::log1p(-ratio)));
        w.push_back(m.y(a));
      }
    }
    auto [i, sl] = weighted_line(x, v, w, std::log(0.05));
    return {i, sl};
  };

  std::map<std::string, Eigen::VectorXd> values;
  for (const auto& b : layout_.blocks()) values[b.name] = Eigen::VectorXd::Zero(b.size);

  auto fill_curve = [&](int rate, int c, Line line) {
    const std::string p = kRatePrefix[rate];
    const RateModel& rm = rate_model(spec_, rate);
    switch (rm.family) {
      case CurveFamily::Smooth:
        values[p + "_beta"](c * k) = line.intercept;
        values[p + "_beta"](c * k + 1) = line.slope;
        break;
      case CurveFamily::Increasing: {
        const double at_eqage = line.intercept + line.slope * (rm.eqage - half) / half;
        values[p + "_base"](c) = at_eqage;
        values[p + "_beta"](c * k) = std::log(std::exp(line.intercept) * 0.03 / kIncrementScale);
        break;
      }
      case CurveFamily::Constant: values[p + "_lograte"](c) = line.intercept; break;
      case CurveFamily::Indep:
        for (int a = 0; a < n_ages; ++a) {
          values[p + "_lograte"](c * n_ages + a) = line.intercept + line.slope * (a - half) / half;
        }
        break;
      case CurveFamily::Zero: break;
    }
    if (layout_.has(p + "_log_lambda")) values[p + "_log_lambda"](0) = std::log(2.0);
  };

  const ObservedCounts& first = data_.groups.front().counts;
  if (spec_.hierarchical) {
    double sum_i = 0, sum_s = 0;
    for (const auto& g : data_.groups) {
      const Line l = cf_line(g.counts);
      sum_i += l.intercept;
      sum_s += l.slope;
    }
    values["cf_b1"](0) = sum_i / data_.groups.size();
    values["cf_b2"](0) = sum_s / data_.groups.size();
    if (layout_.has("cf_log_lambda1")) values["cf_log_lambda1"](0) = std::log(0.4);
    if (layout_.has("cf_log_lambda")) values["cf_log_lambda"](0) = std::log(2.0);
    for (std::size_t g = 0; g < data_.groups.size(); ++g) {
      fill_curve(kInc, static_cast<int>(g), proportion_line(data_.groups[g].counts, Outcome::Inc, 0.005));
    }
  } else {
    fill_curve(kCf, 0, cf_line(first));
    fill_curve(kInc, 0, proportion_line(first, Outcome::Inc, 0.005));
  }
  fill_curve(kRem, 0, proportion_line(first, Outcome::Rem, 0.01));
  if (layout_.has("cf_log_lambda_male")) values["cf_log_lambda_male"](0) = 0.0;
  return layout_.pack(values);
}

double log_likelihood(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec) {
  return Model(data, spec).log_likelihood(theta);
}

double log_prior(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec) {
  return Model(data, spec).log_prior(theta);
}

double log_posterior(const Eigen::VectorXd& theta, const Dataset& data, const ModelSpec& spec,
                     Eigen::VectorXd* grad) {
  return Model(data, spec).log_posterior(theta, grad);
}

}  // namespace illdeath
