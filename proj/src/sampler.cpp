#include "illdeath/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <thread>

namespace illdeath {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct PhasePoint {
  Eigen::VectorXd q, p, g;
  double lp = 0;
};

class DualAveraging {
 public:
  explicit DualAveraging(double delta) : delta_(delta) {}

  void restart(double step) {
    counter_ = 0;
    s_bar_ = 0;
    x_bar_ = 0;
    mu_ = std::log(10 * step);
  }

  double learn(double accept_stat) {
    ++counter_;
    accept_stat = std::min(1.0, accept_stat);
    const double eta = 1.0 / (counter_ + kT0);
    s_bar_ = (1 - eta) * s_bar_ + eta * (delta_ - accept_stat);
    const double x = mu_ - s_bar_ * std::sqrt(counter_) / kGamma;
    const double x_eta = std::pow(counter_, -kKappa);
    x_bar_ = (1 - x_eta) * x_bar_ + x_eta * x;
    return std::exp(x);
  }

  double final_step() const { return std::exp(x_bar_); }

 private:
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10;
  static constexpr double kKappa = 0.75;
  double delta_;
  double counter_ = 0, s_bar_ = 0, x_bar_ = 0, mu_ = 0;
};

/// Ends of the slow metric-adaptation windows, as warmup iteration counts.
std::vector<int> metric_windows(int warmup, int& init_buffer) {
  std::vector<int> ends;
  if (warmup < 20) return ends;
  init_buffer = 75;
  int term_buffer = 50;
  int base = 25;
  if (init_buffer + base + term_buffer > warmup) {
    init_buffer = static_cast<int>(0.15 * warmup);
    term_buffer = static_cast<int>(0.1 * warmup);
    base = warmup - init_buffer - term_buffer;
  }
  const int slow_end = warmup - term_buffer;
  int start = init_buffer;
  for (int size = base; start < slow_end; size *= 2) {
    int end = start + size;
    if (end + 2 * size > slow_end) end = slow_end;
    ends.push_back(end);
    start = end;
  }
  return ends;
}

class Nuts {
 public:
  Nuts(const LogDensity& f, const NutsOptions& options, std::uint64_t seed, int dim)
      : f_(f), opt_(options), rng_(seed), inv_metric_(Eigen::VectorXd::Ones(dim)) {
    if (dense()) set_dense(Eigen::MatrixXd::Identity(dim, dim));
  }

  ChainResult run(const Eigen::VectorXd& init) {
    PhasePoint z;
    z.q = init;
    evaluate(z);
    if (!std::isfinite(z.lp)) throw std::invalid_argument("nuts: log density is not finite at the initial point");

    ChainResult out;
    const int dim = static_cast<int>(init.size());
    out.draws.resize(opt_.draws, dim);
    out.log_density.resize(opt_.draws);
    out.accept_stat.resize(opt_.draws);
    out.tree_depth.resize(opt_.draws);
    out.divergent.resize(opt_.draws);

    int init_buffer = 0;
    const std::vector<int> windows = metric_windows(opt_.warmup, init_buffer);
    std::size_t next_window = 0;
    int window_start = init_buffer;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim), m2 = Eigen::VectorXd::Zero(dim);
    Eigen::MatrixXd m2_dense = dense() ? Eigen::MatrixXd::Zero(dim, dim) : Eigen::MatrixXd();
    int window_n = 0;

    DualAveraging adapt(opt_.target_accept);
    step_ = 1.0;
    init_step_size(z);
    adapt.restart(step_);

    for (int it = 0; it < opt_.warmup + opt_.draws; ++it) {
      const bool warming = it < opt_.warmup;
      Transition t = transition(z);
      if (warming) {
        if (t.divergent) ++out.warmup_divergences;
        step_ = adapt.learn(t.accept_stat);
        if (next_window < windows.size() && it >= window_start) {
          ++window_n;
          const Eigen::VectorXd delta = z.q - mean;
          mean += delta / window_n;
          m2 += delta.cwiseProduct(z.q - mean);
          if (dense()) m2_dense += delta * (z.q - mean).transpose();
          if (it + 1 == windows[next_window]) {
            const double n = window_n;
            const double shrink = 1e-3 * (5.0 / (n + 5.0));
            if (dense()) {
              Eigen::MatrixXd cov = (n / (n + 5.0)) * m2_dense / (n - 1);
              cov.diagonal().array() += shrink;
              set_dense(0.5 * (cov + cov.transpose()));
              m2_dense.setZero();
            } else {
              inv_metric_ = (n / (n + 5.0)) * (m2 / (n - 1)).array() + shrink;
            }
            window_start = windows[next_window];
            ++next_window;
            mean.setZero();
            m2.setZero();
            window_n = 0;
            init_step_size(z);
            adapt.restart(step_);
          }
        }
        if (it + 1 == opt_.warmup) step_ = adapt.final_step();
      } else {
        const int k = it - opt_.warmup;
        out.draws.row(k) = z.q.transpose();
        out.log_density(k) = z.lp;
        out.accept_stat(k) = t.accept_stat;
        out.tree_depth[k] = t.depth;
        out.divergent[k] = t.divergent;
      }
    }
    out.step_size = step_;
    out.inv_metric = inv_metric_;
    if (dense()) out.inv_metric_dense = inv_metric_dense_;
    out.gradient_evaluations = evaluations_;
    return out;
  }

 private:
  struct Transition {
    double accept_stat = 0;
    int depth = 0;
    bool divergent = false;
  };

  struct TreeState {
    double sum_metro_prob = 0;
    int n_leapfrog = 0;
    bool divergent = false;
  };

  void evaluate(PhasePoint& z) {
    ++evaluations_;
    z.lp = f_(z.q, &z.g);
    if (!std::isfinite(z.lp) || !z.g.allFinite()) {
      z.lp = -kInf;
      z.g = Eigen::VectorXd::Zero(z.q.size());
    }
  }

  bool dense() const { return opt_.metric == Metric::Dense; }

  void set_dense(const Eigen::MatrixXd& inv_metric) {
    Eigen::LLT<Eigen::MatrixXd> llt(inv_metric);
    if (llt.info() != Eigen::Success) return;  // keep the previous metric
    inv_metric_dense_ = inv_metric;
    inv_metric_ = inv_metric.diagonal();
    chol_ = llt.matrixL();
  }

  double hamiltonian(const PhasePoint& z) const {
    const double h = -z.lp + 0.5 * z.p.dot(sharp(z.p));
    return std::isnan(h) ? kInf : h;
  }

  Eigen::VectorXd sharp(const Eigen::VectorXd& p) const {
    if (dense()) return inv_metric_dense_ * p;
    return inv_metric_.cwiseProduct(p);
  }

  void sample_momentum(PhasePoint& z) {
    const Eigen::Index dim = z.q.size();
    Eigen::VectorXd u(dim);
    for (Eigen::Index j = 0; j < dim; ++j) u(j) = normal_(rng_);
    if (dense()) {
      z.p = chol_.transpose().triangularView<Eigen::Upper>().solve(u);
    } else {
      z.p = u.array() / inv_metric_.array().sqrt();
    }
  }

  void leapfrog(PhasePoint& z, double eps) {
    z.p += 0.5 * eps * z.g;
    z.q += eps * sharp(z.p);
    evaluate(z);
    z.p += 0.5 * eps * z.g;
  }

  void init_step_size(const PhasePoint& start) {
    const double log_target = std::log(0.8);
    int direction = 0;
    for (int tries = 0; tries < 100; ++tries) {
      PhasePoint z = start;
      sample_momentum(z);
      const double h0 = hamiltonian(z);
      leapfrog(z, step_);
      const double delta = h0 - hamiltonian(z);
      if (direction == 0) direction = delta > log_target ? 1 : -1;
      if (direction == 1 && !(delta > log_target)) return;
      if (direction == -1 && !(delta < log_target)) return;
      step_ = direction == 1 ? 2 * step_ : 0.5 * step_;
      if (step_ > 1e7) throw std::runtime_error("nuts: posterior is improper, step size diverged");
      if (step_ == 0) throw std::runtime_error("nuts: no acceptable step size");
    }
  }

  static bool no_u_turn(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus,
                        const Eigen::VectorXd& rho) {
    return p_sharp_plus.dot(rho) > 0 && p_sharp_minus.dot(rho) > 0;
  }

  bool build_tree(int depth, PhasePoint& z, PhasePoint& z_propose, Eigen::VectorXd& p_sharp_beg,
                  Eigen::VectorXd& p_sharp_end, Eigen::VectorXd& rho, Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end,
                  double h0, double sign, TreeState& s, double& log_sum_weight) {
    if (depth == 0) {
      leapfrog(z, sign * step_);
      ++s.n_leapfrog;
      const double h = hamiltonian(z);
      if (h - h0 > opt_.max_energy_error) s.divergent = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      s.sum_metro_prob += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
      z_propose = z;
      p_sharp_beg = sharp(z.p);
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = z.p;
      return !s.divergent;
    }
    const Eigen::Index dim = z.q.size();

    Eigen::VectorXd p_sharp_init_end(dim), p_init_end(dim), rho_init = Eigen::VectorXd::Zero(dim);
    double lsw_init = -kInf;
    if (!build_tree(depth - 1, z, z_propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg, p_init_end, h0, sign, s,
                    lsw_init)) {
      return false;
    }

    PhasePoint z_propose_final = z;
    Eigen::VectorXd p_sharp_final_beg(dim), p_final_beg(dim), rho_final = Eigen::VectorXd::Zero(dim);
    double lsw_final = -kInf;
    if (!build_tree(depth - 1, z, z_propose_final, p_sharp_final_beg, p_sharp_end, rho_final, p_final_beg, p_end, h0,
                    sign, s, lsw_final)) {
      return false;
    }

    const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    if (lsw_final > lsw_subtree || uniform_(rng_) < std::exp(lsw_final - lsw_subtree)) z_propose = z_propose_final;

    const Eigen::VectorXd rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = no_u_turn(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && no_u_turn(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && no_u_turn(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }

  Transition transition(PhasePoint& z) {
    sample_momentum(z);
    const double h0 = hamiltonian(z);
    PhasePoint z_fwd = z, z_bck = z, z_sample = z, z_propose = z;
    Eigen::VectorXd p_fwd_fwd = z.p, p_fwd_bck = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
    Eigen::VectorXd p_sharp_fwd_fwd = sharp(z.p), p_sharp_fwd_bck = p_sharp_fwd_fwd;
    Eigen::VectorXd p_sharp_bck_fwd = p_sharp_fwd_fwd, p_sharp_bck_bck = p_sharp_fwd_fwd;
    Eigen::VectorXd rho = z.p;
    double log_sum_weight = 0;
    TreeState s;
    int depth = 0;
    const Eigen::Index dim = z.q.size();

    while (depth < opt_.max_depth) {
      Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(dim), rho_bck = Eigen::VectorXd::Zero(dim);
      double lsw_subtree = -kInf;
      bool valid = false;
      if (uniform_(rng_) > 0.5) {
        PhasePoint edge = z_fwd;
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        valid = build_tree(depth, edge, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, h0,
                           1.0, s, lsw_subtree);
        z_fwd = edge;
      } else {
        PhasePoint edge = z_bck;
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        valid = build_tree(depth, edge, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, h0,
                           -1.0, s, lsw_subtree);
        z_bck = edge;
      }
      if (!valid) break;
      ++depth;

      if (lsw_subtree > log_sum_weight || uniform_(rng_) < std::exp(lsw_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

      rho = rho_bck + rho_fwd;
      bool persist = no_u_turn(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      persist = persist && no_u_turn(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
      persist = persist && no_u_turn(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
      if (!persist) break;
    }
    z = z_sample;
    return Transition{s.n_leapfrog > 0 ? s.sum_metro_prob / s.n_leapfrog : 0.0, depth, s.divergent};
  }

  const LogDensity& f_;
  NutsOptions opt_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  Eigen::VectorXd inv_metric_;
  Eigen::MatrixXd inv_metric_dense_, chol_;
  double step_ = 1.0;
  long evaluations_ = 0;
};

double mean_of(const Eigen::VectorXd& x) { return x.mean(); }

double variance_of(const Eigen::VectorXd& x) {
  if (x.size() < 2) return 0;
  return (x.array() - x.mean()).square().sum() / static_cast<double>(x.size() - 1);
}

}  // namespace

int ChainResult::divergences() const {
  return static_cast<int>(std::count(divergent.begin(), divergent.end(), true));
}

ChainResult run_nuts_chain(const LogDensity& log_density, const Eigen::VectorXd& init, const NutsOptions& options,
                           std::uint64_t seed) {
  if (options.draws < 1 || options.warmup < 0) throw std::invalid_argument("nuts: need draws >= 1 and warmup >= 0");
  Nuts nuts(log_density, options, seed, static_cast<int>(init.size()));
  return nuts.run(init);
}

std::vector<ChainResult> run_nuts(const LogDensity& log_density, const std::vector<Eigen::VectorXd>& inits,
                                  const NutsOptions& options, std::uint64_t seed, int threads) {
  const int n = static_cast<int>(inits.size());
  std::vector<ChainResult> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](int c) {
    try {
      out[c] = run_nuts_chain(log_density, inits[c], options, seed + static_cast<std::uint64_t>(c));
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  threads = std::max(1, threads);
  for (int first = 0; first < n; first += threads) {
    const int last = std::min(n, first + threads);
    if (last - first == 1) {
      run_one(first);
      continue;
    }
    std::vector<std::thread> pool;
    for (int c = first; c < last; ++c) pool.emplace_back(run_one, c);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<Eigen::VectorXd> parameter_chains(const std::vector<ChainResult>& chains, int index) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(chains.size());
  for (const auto& c : chains) out.push_back(c.draws.col(index));
  return out;
}

namespace {

std::vector<Eigen::VectorXd> split_halves(const std::vector<Eigen::VectorXd>& chains) {
  std::vector<Eigen::VectorXd> halves;
  for (const auto& c : chains) {
    const Eigen::Index half = c.size() / 2;
    halves.push_back(c.head(half));
    halves.push_back(c.tail(half));
  }
  return halves;
}

}  // namespace

double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
  const auto halves = split_halves(chains);
  const double m = static_cast<double>(halves.size());
  const double n = static_cast<double>(halves.front().size());
  if (m < 2 || n < 2) return std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd means(halves.size());
  double w = 0;
  for (std::size_t k = 0; k < halves.size(); ++k) {
    means(static_cast<Eigen::Index>(k)) = mean_of(halves[k]);
    w += variance_of(halves[k]);
  }
  w /= m;
  const double b = n * variance_of(means);
  if (w <= 0) return b <= 0 ? 1.0 : std::numeric_limits<double>::infinity();
  const double var_plus = (n - 1) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

double effective_sample_size(const std::vector<Eigen::VectorXd>& chains) {
  const int m = static_cast<int>(chains.size());
  Eigen::Index n = chains.front().size();
  for (const auto& c : chains) n = std::min(n, c.size());
  if (n < 4) return std::numeric_limits<double>::quiet_NaN();

  std::vector<Eigen::VectorXd> centered;
  Eigen::VectorXd means(m), vars(m);
  for (int k = 0; k < m; ++k) {
    const Eigen::VectorXd c = chains[k].head(n);
    means(k) = c.mean();
    centered.push_back(c.array() - means(k));
    vars(k) = centered.back().squaredNorm() / static_cast<double>(n - 1);
  }
  const double nd = static_cast<double>(n);
  const double w = vars.mean();
  const double b_over_n = m > 1 ? variance_of(means) : 0.0;
  const double var_plus = w * (nd - 1) / nd + b_over_n;
  if (!(var_plus > 0)) return nd * m;

  // Autocorrelation at a lag, averaged over chains (biased autocovariance).
  auto rho = [&](Eigen::Index lag) {
    double acov = 0;
    for (int k = 0; k < m; ++k) {
      const auto& c = centered[k];
      acov += c.head(n - lag).dot(c.tail(n - lag)) / nd;
    }
    acov /= m;
    const double acov0 = w * (nd - 1) / nd;
    return 1.0 - (acov0 - acov) / var_plus;
  };

  double sum_pairs = 0;
  double prev_pair = kInf;
  Eigen::Index lag = 0;
  while (lag + 1 < n) {
    double pair = rho(lag) + rho(lag + 1);
    if (pair < 0) break;
    pair = std::min(pair, prev_pair);
    sum_pairs += pair;
    prev_pair = pair;
    lag += 2;
  }
  const double tau = -1.0 + 2.0 * sum_pairs;
  const double ess = nd * m / std::max(tau, 1.0 / std::log10(nd * m));
  return ess;
}

}  // namespace illdeath
