#include "illdeath/cli.hpp"

#include "illdeath/checking.hpp"
#include "illdeath/data_prep.hpp"
#include "illdeath/inference.hpp"
#include "illdeath/io.hpp"
#include "illdeath/simulator.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

namespace illdeath {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  body(out);
  if (!out) throw std::runtime_error(fmt::format("error writing {}", path.string()));
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open {}", path.string()));
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw InputError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

/// Copies `from` into `into`, rejecting keys that `into` does not have.
/// Objects listed in `open` accept any key.
void merge_known(Json& into, const Json& from, const std::string& where, const std::set<std::string>& open = {}) {
  if (!from.is_object()) throw InputError(fmt::format("{}: expected an object", where));
  for (const auto& [key, value] : from.items()) {
    if (!into.contains(key)) throw InputError(fmt::format("{}: unknown key '{}'", where, key));
    if (into[key].is_object() && !open.count(key)) {
      merge_known(into[key], value, where + "." + key);
    } else {
      into[key] = value;
    }
  }
}

std::vector<std::pair<std::string, double>> parse_assignments(const std::vector<std::string>& items,
                                                              const std::string& flag) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw InputError(fmt::format("{}: expected name=value, got '{}'", flag, item));
    try {
      std::size_t used = 0;
      const double v = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing characters");
      out.emplace_back(item.substr(0, eq), v);
    } catch (const std::exception&) {
      throw InputError(fmt::format("{}: '{}' is not a number", flag, item.substr(eq + 1)));
    }
  }
  return out;
}

int default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// prep

struct PrepOptions {
  std::string input;
  std::string output;
  std::vector<std::string> weights;
  double max_objective = 1e-3;
  std::string group_column = "group";
  std::string gender_column = "gender";
};

struct PrepRow {
  int lo = 0, hi = 0;
  std::size_t row = 0;
};

/// How one outcome is given in a prep input file.
struct OutcomeColumns {
  std::optional<std::size_t> num, denom, est, lo, hi, surv10;
};

std::optional<EffectiveCounts> prep_counts(const CsvTable& t, std::size_t r, const OutcomeColumns& c,
                                           const std::string& name, double max_objective) {
  auto get = [&](const std::optional<std::size_t>& col) { return col ? t.number(r, *col) : std::nullopt; };
  auto where = [&] { return fmt::format("{}:{}: {}", t.source(), r + 2, name); };
  const auto num = get(c.num), denom = get(c.denom), est = get(c.est), lo = get(c.lo), hi = get(c.hi),
             surv = get(c.surv10);
  try {
    if (num) {
      if (!denom) throw InputError(where() + ": numerator without a denominator");
      if (!(*num >= 0 && *num <= *denom)) throw InputError(where() + ": need 0 <= num <= denom");
      return EffectiveCounts{*num, *denom};
    }
    if (est && lo && hi) return beta_from_quantiles({*est, *lo, *hi}, max_objective);
    if (est && denom) return counts_from_estimate(*est, *denom);
    if (surv && denom) return counts_from_estimate(remission_from_survival(*surv).probability, *denom);
    if (est || lo || hi || surv || denom) throw InputError(where() + ": incomplete set of values");
  } catch (const InputError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError(fmt::format("{}: {}", where(), e.what()));
  }
  return std::nullopt;
}

int cmd_prep(const PrepOptions& opt, std::ostream& out) {
  const CsvTable t = CsvTable::read(opt.input);
  std::map<Outcome, double> weights;
  for (const auto& [name, w] : parse_assignments(opt.weights, "--weight")) {
    Outcome o;
    try {
      o = parse_outcome(name);
    } catch (const std::invalid_argument& e) {
      throw InputError(fmt::format("--weight: {}", e.what()));
    }
    if (!(w > 0 && w <= 1)) throw InputError(fmt::format("--weight: {} must lie in (0, 1]", w));
    weights[o] = w;
  }

  std::map<Outcome, OutcomeColumns> outcomes;
  for (Outcome o : kOutcomes) {
    const std::string p = to_string(o) + "_";
    OutcomeColumns c{t.find(p + "num"), t.find(p + "denom"), t.find(p + "est"),
                     t.find(p + "lo"),  t.find(p + "hi"),    o == Outcome::Rem ? t.find(p + "surv10") : std::nullopt};
    if (c.lo.has_value() != c.hi.has_value()) {
      throw InputError(fmt::format("{}: columns {}lo and {}hi go together", t.source(), p, p));
    }
    if (c.num && !c.denom) throw InputError(fmt::format("{}: column {}num needs {}denom", t.source(), p, p));
    if (c.num || c.est || c.surv10) outcomes[o] = c;
  }
  if (outcomes.empty()) throw InputError(fmt::format("{}: no outcome columns", t.source()));

  const auto age_col = t.find("age");
  const auto lo_col = t.find("age_lo"), hi_col = t.find("age_hi");
  if (!age_col && !(lo_col && hi_col)) throw InputError(fmt::format("{}: need column 'age' or 'age_lo' and 'age_hi'", t.source()));
  const auto group_col = t.find(opt.group_column), gender_col = t.find(opt.gender_column);

  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<PrepRow>> rows;
  int max_age = 0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    PrepRow row;
    row.row = r;
    row.lo = age_col ? t.integer(r, *age_col) : t.integer(r, *lo_col);
    row.hi = age_col ? row.lo : t.integer(r, *hi_col);
    if (row.lo < 0 || row.hi < row.lo) throw InputError(fmt::format("{}:{}: invalid age range", t.source(), r + 2));
    max_age = std::max(max_age, row.hi);
    std::pair<std::string, std::string> key{group_col ? t.cell(r, *group_col) : "all",
                                            gender_col ? t.cell(r, *gender_col) : ""};
    if (!rows.count(key)) keys.push_back(key);
    rows[key].push_back(row);
  }
  if (keys.empty()) throw InputError(fmt::format("{}: no data rows", t.source()));

  std::vector<PreparedGroup> prepared;
  for (const auto& key : keys) {
    auto& list = rows[key];
    std::stable_sort(list.begin(), list.end(), [](const PrepRow& a, const PrepRow& b) { return a.lo < b.lo; });
    for (std::size_t k = 1; k < list.size(); ++k) {
      if (list[k].lo != list[k - 1].hi + 1) {
        throw InputError(fmt::format("{}:{}: ages {}-{} do not continue from {} for group '{}'", t.source(),
                                     list[k].row + 2, list[k].lo, list[k].hi, list[k - 1].hi, key.first));
      }
    }
    PreparedGroup g{key.first, key.second, ObservedCounts(max_age), list.front().lo};
    for (const auto& [o, cols] : outcomes) {
      std::vector<AgeGroupCounts> groups;
      for (const auto& row : list) {
        const auto c = prep_counts(t, row.row, cols, to_string(o), opt.max_objective);
        groups.push_back({row.lo, row.hi, c ? c->y : 0.0, c ? c->n : 0.0});
      }
      const YearlyCounts yearly = disaggregate(groups);
      Eigen::VectorXd y = Eigen::VectorXd::Zero(max_age + 1), n = y;
      y.segment(yearly.age_start, yearly.y.size()) = yearly.y;
      n.segment(yearly.age_start, yearly.n.size()) = yearly.n;
      if (weights.count(o)) {
        y *= weights[o];
        n *= weights[o];
      }
      g.counts.set(o, y, n);
    }
    prepared.push_back(std::move(g));
  }
  if (opt.output.empty()) {
    write_prepared(out, prepared);
  } else {
    write_file(opt.output, [&](std::ostream& os) { write_prepared(os, prepared); });
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit

Json default_fit_config() {
  Json prior = {
      {"intercept_sd", 100.0},          {"slope_sd", 100.0},
      {"smoothness_shape", 2.0},        {"smoothness_rate", 1.0},
      {"area_mean_intercept_mean", 0.0}, {"area_mean_intercept_sd", 10.0},
      {"common_slope_mean", 5.0},       {"common_slope_sd", 5.0},
      {"area_sd_shape", nullptr},       {"area_sd_rate", nullptr},
      {"male_linear_sd", 0.82},         {"rem_lograte_mean", 0.0},
      {"rem_lograte_sd", 10.0},         {"indep_lograte_sd", 10.0},
      {"const_lograte_mean", 0.0},      {"const_lograte_sd", 100.0},
  };
  Json columns = Json::object();
  const CountColumns defaults;
  for (Outcome o : kOutcomes) {
    columns[defaults.num(o)] = defaults.num(o);
    columns[defaults.denom(o)] = defaults.denom(o);
  }
  return {
      {"data", nullptr},
      {"output", nullptr},
      {"method", "opt"},
      {"cf_model", "smooth"},
      {"inc_model", "smooth"},
      {"rem_model", "auto"},
      {"cf_eqage", 0},
      {"inc_eqage", 0},
      {"rem_eqage", 0},
      {"basis_dim", 10},
      {"hierarchical", false},
      {"estimate_lambda_male", false},
      {"group_column", "group"},
      {"gender_column", "gender"},
      {"columns", columns},
      {"hp_fixed", Json::object()},
      {"inc_trend", nullptr},
      {"cf_trend", nullptr},
      {"prior", prior},
      {"chains", 4},
      {"warmup", 1000},
      {"iterations", 1000},
      {"target_accept", 0.8},
      {"max_depth", 10},
      {"metric", "diag"},
      {"laplace_draws", 1000},
      {"restarts", 3},
      {"seed", 1},
      {"threads", nullptr},
      {"quantiles", {0.025, 0.975}},
      {"plot_data", false},
  };
}

struct FitFlags {
  std::string config;
  std::optional<std::string> data, output, method, cf_model, inc_model, rem_model, metric;
  std::optional<int> cf_eqage, inc_eqage, chains, warmup, iterations, laplace_draws, threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> inc_trend, cf_trend;
  std::vector<std::string> hp_fixed;
  bool hierarchical = false;
  bool plot_data = false;
};

Json resolve_fit_config(const FitFlags& flags) {
  Json cfg = default_fit_config();
  if (!flags.config.empty()) merge_known(cfg, read_json(flags.config), flags.config, {"hp_fixed"});
  auto set = [&](const char* key, const auto& value) {
    if (value) cfg[key] = *value;
  };
  set("data", flags.data);
  set("output", flags.output);
  set("method", flags.method);
  set("cf_model", flags.cf_model);
  set("inc_model", flags.inc_model);
  set("rem_model", flags.rem_model);
  set("cf_eqage", flags.cf_eqage);
  set("inc_eqage", flags.inc_eqage);
  set("chains", flags.chains);
  set("warmup", flags.warmup);
  set("iterations", flags.iterations);
  set("laplace_draws", flags.laplace_draws);
  set("metric", flags.metric);
  set("threads", flags.threads);
  set("seed", flags.seed);
  set("inc_trend", flags.inc_trend);
  set("cf_trend", flags.cf_trend);
  if (flags.hierarchical) cfg["hierarchical"] = true;
  if (flags.plot_data) cfg["plot_data"] = true;
  for (const auto& [name, value] : parse_assignments(flags.hp_fixed, "--hp-fixed")) cfg["hp_fixed"][name] = value;
  if (cfg["threads"].is_null()) cfg["threads"] = default_threads();
  if (cfg["data"].is_null()) throw InputError("fit: no data file (--data or \"data\" in the config)");
  if (cfg["output"].is_null()) throw InputError("fit: no output directory (--output or \"output\" in the config)");
  return cfg;
}

PriorSettings prior_from(const Json& p) {
  PriorSettings s;
  const std::map<std::string, double*> fields{
      {"intercept_sd", &s.intercept_sd},
      {"slope_sd", &s.slope_sd},
      {"smoothness_shape", &s.smoothness.shape},
      {"smoothness_rate", &s.smoothness.rate},
      {"area_mean_intercept_mean", &s.area_mean_intercept_mean},
      {"area_mean_intercept_sd", &s.area_mean_intercept_sd},
      {"common_slope_mean", &s.common_slope_mean},
      {"common_slope_sd", &s.common_slope_sd},
      {"area_sd_shape", &s.area_sd.shape},
      {"area_sd_rate", &s.area_sd.rate},
      {"male_linear_sd", &s.male_linear_sd},
      {"rem_lograte_mean", &s.rem_lograte_mean},
      {"rem_lograte_sd", &s.rem_lograte_sd},
      {"indep_lograte_sd", &s.indep_lograte_sd},
      {"const_lograte_mean", &s.const_lograte_mean},
      {"const_lograte_sd", &s.const_lograte_sd},
  };
  for (const auto& [key, value] : p.items()) {
    if (!value.is_null()) *fields.at(key) = value.get<double>();
  }
  return s;
}

/// One model to fit: the whole file (hierarchical) or one group of it.
struct FitJob {
  Dataset data;
  ModelSpec spec;
  std::shared_ptr<const Model> model;
};

std::vector<FitJob> build_jobs(const Json& cfg, const std::vector<PreparedGroup>& groups) {
  ModelSpec base;
  base.cf = {parse_curve_family(cfg.at("cf_model").get<std::string>()), cfg.at("cf_eqage").get<int>()};
  base.inc = {parse_curve_family(cfg.at("inc_model").get<std::string>()), cfg.at("inc_eqage").get<int>()};
  const std::string rem = cfg.at("rem_model").get<std::string>();
  bool has_rem = false;
  for (const auto& g : groups) has_rem = has_rem || (g.counts.has(Outcome::Rem) && g.counts.get(Outcome::Rem).n.sum() > 0);
  base.rem = {rem == "auto" ? (has_rem ? CurveFamily::Constant : CurveFamily::Zero) : parse_curve_family(rem),
              cfg.at("rem_eqage").get<int>()};
  base.basis_dim = cfg.at("basis_dim").get<int>();
  base.hierarchical = cfg.at("hierarchical").get<bool>();
  base.estimate_lambda_male = cfg.at("estimate_lambda_male").get<bool>();
  base.prior = prior_from(cfg.at("prior"));
  for (const auto& [name, value] : cfg.at("hp_fixed").items()) base.hp_fixed[name] = value.get<double>();
  if (!cfg.at("inc_trend").is_null()) base.inc_trend = read_trend(cfg.at("inc_trend").get<std::string>());
  if (!cfg.at("cf_trend").is_null()) base.cf_trend = read_trend(cfg.at("cf_trend").get<std::string>());
  if (base.inc_trend.has_value() != base.cf_trend.has_value()) {
    // A missing trend file means no change over time for that rate.
    const auto& given = base.inc_trend ? *base.inc_trend : *base.cf_trend;
    const TrendMatrix flat = TrendMatrix::Ones(given.rows(), given.cols());
    if (!base.inc_trend) base.inc_trend = flat;
    if (!base.cf_trend) base.cf_trend = flat;
  }

  std::vector<std::string> genders;
  for (const auto& g : groups) {
    if (std::find(genders.begin(), genders.end(), g.gender) == genders.end()) genders.push_back(g.gender);
  }
  std::sort(genders.begin(), genders.end());

  std::vector<FitJob> jobs;
  if (base.hierarchical) {
    if (genders.size() > 2) throw InputError("fit: at most two genders are supported");
    Dataset d;
    d.area_names.clear();
    d.gender_names = genders;
    for (const auto& g : groups) {
      if (std::find(d.area_names.begin(), d.area_names.end(), g.group) == d.area_names.end()) d.area_names.push_back(g.group);
    }
    for (const auto& g : groups) {
      const int area = static_cast<int>(std::find(d.area_names.begin(), d.area_names.end(), g.group) - d.area_names.begin());
      const int gender = static_cast<int>(std::find(genders.begin(), genders.end(), g.gender) - genders.begin());
      d.groups.push_back(GroupData{area, gender, g.counts});
    }
    ModelSpec spec = base;
    spec.gender_additive = genders.size() == 2;
    jobs.push_back({std::move(d), spec, nullptr});
  } else {
    if (genders.size() > 1) {
      throw InputError("fit: a gender column with more than one value needs a hierarchical model (--hierarchical)");
    }
    for (const auto& g : groups) {
      Dataset d;
      d.area_names = {g.group};
      d.gender_names = {g.gender};
      d.groups.push_back(GroupData{0, 0, g.counts});
      jobs.push_back({std::move(d), base, nullptr});
    }
  }
  for (auto& job : jobs) job.model = std::make_shared<const Model>(job.data, job.spec);
  return jobs;
}

Json named_values(const std::vector<std::string>& labels, const Eigen::VectorXd& v) {
  Json out = Json::object();
  for (std::size_t i = 0; i < labels.size() && static_cast<Eigen::Index>(i) < v.size(); ++i) out[labels[i]] = v(i);
  return out;
}

Json diagnostics_json(const FitResult& fit) {
  const auto& d = fit.diagnostics;
  Json j = {{"converged", d.converged}, {"warnings", d.warnings}, {"failed_draws", d.failed_draws}};
  if (fit.method == Method::Opt) {
    j["log_posterior"] = d.log_posterior;
    j["gradient_norm"] = d.gradient_norm;
    j["iterations"] = d.iterations;
    j["hessian_min_eigenvalue"] = d.hessian_min_eigenvalue;
    j["hessian_condition"] = d.hessian_condition;
    j["trace"] = d.trace;
  } else {
    const auto labels = fit.model->layout().labels();
    j["rhat"] = named_values(labels, d.rhat);
    j["ess"] = named_values(labels, d.ess);
    j["max_rhat"] = d.rhat.size() ? d.rhat.maxCoeff() : 0.0;
    j["min_ess"] = d.ess.size() ? d.ess.minCoeff() : 0.0;
    j["divergences"] = d.divergences;
    j["divergence_fraction"] = d.divergence_fraction;
    j["step_sizes"] = d.step_sizes;
  }
  j["free_hyperparameters"] = fit.model->free_hyperparameters();
  return j;
}

int cmd_fit(const FitFlags& flags, std::ostream& out, std::ostream& err) {
  const Json cfg = resolve_fit_config(flags);
  CountColumns columns;
  for (const auto& [key, value] : cfg.at("columns").items()) {
    for (auto& [o, names] : columns.names) {
      if (names.first == key) names.first = value.get<std::string>();
      if (names.second == key) names.second = value.get<std::string>();
    }
  }
  const CsvTable table = CsvTable::read(cfg.at("data").get<std::string>());
  const auto groups =
      read_prepared(table, columns, cfg.at("group_column").get<std::string>(), cfg.at("gender_column").get<std::string>());

  FitOptions options;
  options.chains = cfg.at("chains").get<int>();
  options.warmup = cfg.at("warmup").get<int>();
  options.iterations = cfg.at("iterations").get<int>();
  options.target_accept = cfg.at("target_accept").get<double>();
  options.max_depth = cfg.at("max_depth").get<int>();
  const std::string metric = cfg.at("metric").get<std::string>();
  if (metric == "dense") {
    options.metric = Metric::Dense;
  } else if (metric != "diag") {
    throw std::invalid_argument("config: metric must be diag or dense, got '" + metric + "'");
  }
  options.laplace_draws = cfg.at("laplace_draws").get<int>();
  options.restarts = cfg.at("restarts").get<int>();
  options.seed = cfg.at("seed").get<std::uint64_t>();
  options.threads = cfg.at("threads").get<int>();
  options.allow_nonconvergence = true;
  const Method method = parse_method(cfg.at("method").get<std::string>());
  if (method == Method::Mcmc && options.chains < 2) throw InputError("fit: mcmc needs at least 2 chains");
  if (options.threads < 1) throw InputError("fit: threads must be at least 1");
  TidyOptions tidy_options;
  tidy_options.quantiles = cfg.at("quantiles").get<std::vector<double>>();
  if (tidy_options.quantiles.empty()) throw InputError("fit: quantiles must not be empty");
  for (double q : tidy_options.quantiles) {
    if (!(q > 0 && q < 1)) throw InputError("fit: quantiles must lie in (0, 1)");
  }

  std::vector<FitJob> jobs = build_jobs(cfg, groups);

  const fs::path dir = cfg.at("output").get<std::string>();
  bool all_converged = true;
  TidyTable tidy_all;
  tidy_all.quantiles = tidy_options.quantiles;
  std::vector<CheckRow> checks;
  LooResult loo_all;
  bool have_loo = method == Method::Mcmc;
  Json fits = Json::array();
  for (const auto& job : jobs) {
    Json entry = {{"group", job.data.area_names.size() == 1 ? job.data.area_names[0] : "all"},
                  {"gender", job.data.gender_names.size() == 1 ? job.data.gender_names[0] : ""}};
    try {
      const FitResult fit = method == Method::Opt ? fit_mode(job.model, options) : fit_mcmc(job.model, options);
      Json d = diagnostics_json(fit);
      const TidyTable t = tidy(fit, tidy_options);
      tidy_all.rows.insert(tidy_all.rows.end(), t.rows.begin(), t.rows.end());
      const auto rows = fitted_vs_observed(fit);
      checks.insert(checks.end(), rows.begin(), rows.end());
      d["mean_abs_mort_discrepancy"] = mean_abs_discrepancy(rows, Outcome::Mort);
      if (have_loo && fit.draws.rows() >= 1000) {
        const LooResult loo = psis_loo(fit);
        loo_all.keys.insert(loo_all.keys.end(), loo.keys.begin(), loo.keys.end());
        auto append = [](Eigen::VectorXd& into, const Eigen::VectorXd& more) {
          Eigen::VectorXd joined(into.size() + more.size());
          joined << into, more;
          into = joined;
        };
        append(loo_all.elpd, loo.elpd);
        append(loo_all.khat, loo.khat);
        append(loo_all.lpd, loo.lpd);
        d["loo_unreliable"] = loo.n_flagged();
      } else if (have_loo) {
        have_loo = false;
        d["warnings"].push_back("leave-one-out skipped: fewer than 1000 draws");
      }
      all_converged = all_converged && fit.diagnostics.converged;
      for (const auto& w : fit.diagnostics.warnings) err << "warning: " << entry["group"].get<std::string>() << ": " << w << '\n';
      entry.update(d);
    } catch (const NonIdentifiableError& e) {
      all_converged = false;
      entry["converged"] = false;
      entry["error"] = e.what();
      entry["parameter"] = e.parameter;
      err << "error: " << e.what() << '\n';
    }
    fits.push_back(entry);
  }

  Json diagnostics = {{"method", to_string(method)}, {"converged", all_converged}, {"fits", fits}, {"config", cfg}};
  write_file(dir / "diagnostics.json", [&](std::ostream& os) { os << diagnostics.dump(2) << '\n'; });
  write_file(dir / "tidy.csv", [&](std::ostream& os) { write_tidy(os, tidy_all); });
  write_file(dir / "check.csv", [&](std::ostream& os) { write_check(os, checks); });
  if (have_loo) write_file(dir / "loo.csv", [&](std::ostream& os) { write_loo(os, loo_all); });
  if (cfg.at("plot_data").get<bool>()) {
    for (const auto& var : kTidyVariables) {
      TidyTable part;
      part.quantiles = tidy_all.quantiles;
      for (const auto& r : tidy_all.rows) {
        if (r.var == var) part.rows.push_back(r);
      }
      write_file(dir / "plot" / (var + ".csv"), [&](std::ostream& os) { write_tidy(os, part); });
    }
    write_file(dir / "plot" / "observed.csv", [&](std::ostream& os) { write_check(os, checks); });
  }
  out << fmt::format("{} fit of {} model(s) written to {}{}\n", to_string(method), jobs.size(), dir.string(),
                     all_converged ? "" : " (not converged)");
  return all_converged ? kExitOk : kExitConvergence;
}

// ---------------------------------------------------------------------------
// loo

struct LooFlags {
  std::vector<std::string> inputs;
  std::string labels;
  std::optional<std::string> outcome;
  std::optional<int> age_min, age_max;
  std::string output;
};

int cmd_loo(const LooFlags& flags, std::ostream& out) {
  if (flags.inputs.size() < 2) throw InputError("loo: give at least two fits to compare");
  std::vector<std::string> labels;
  if (!flags.labels.empty()) {
    std::stringstream ss(flags.labels);
    for (std::string item; std::getline(ss, item, ',');) labels.push_back(item);
    if (labels.size() != flags.inputs.size()) throw InputError("loo: one label per fit required");
  }
  std::vector<LooResult> results;
  for (const auto& input : flags.inputs) {
    fs::path p = input;
    if (fs::is_directory(p)) p /= "loo.csv";
    results.push_back(read_loo(CsvTable::read(p)));
    if (flags.labels.empty()) labels.push_back(fs::path(input).lexically_normal().filename().string());
  }
  LooFilter filter;
  if (flags.outcome) filter.outcome = parse_outcome(*flags.outcome);
  filter.age_min = flags.age_min;
  filter.age_max = flags.age_max;
  const LooComparison cmp = compare_loo(results, labels, filter);
  if (flags.output.empty()) {
    write_comparison(out, cmp);
  } else {
    write_file(flags.output, [&](std::ostream& os) { write_comparison(os, cmp); });
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate

Json default_truth_config() {
  return {
      {"max_age", 99},
      {"seed", 1},
      {"group", "all"},
      {"outcomes", {"inc", "prev", "mort"}},
      {"denominator", 1e5},
      {"inc", nullptr},
      {"cf", nullptr},
      {"rem", 0.0},
  };
}

/// A rate given as a constant or as log rate = intercept + slope * age +
/// quadratic * (age - center)^2.
Eigen::VectorXd rate_curve(const Json& j, int max_age, const std::string& name) {
  Eigen::VectorXd r(max_age + 1);
  if (j.is_number()) {
    r.setConstant(j.get<double>());
  } else if (j.is_object()) {
    Json p = {{"intercept", nullptr}, {"slope", 0.0}, {"quadratic", 0.0}, {"center", 0.0}};
    merge_known(p, j, "truth." + name);
    if (p["intercept"].is_null()) throw InputError(fmt::format("truth.{}: intercept is required", name));
    for (int a = 0; a <= max_age; ++a) {
      const double c = a - p["center"].get<double>();
      r(a) = std::exp(p["intercept"].get<double>() + p["slope"].get<double>() * a + p["quadratic"].get<double>() * c * c);
    }
  } else {
    throw InputError(fmt::format("truth.{}: expected a number or an object", name));
  }
  if (!(r.array() >= 0).all() || !r.allFinite()) throw InputError(fmt::format("truth.{}: rates must be non-negative", name));
  return r;
}

struct SimulateFlags {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const SimulateFlags& flags, std::ostream& out) {
  Json cfg = default_truth_config();
  merge_known(cfg, read_json(flags.config), flags.config, {"denominator"});
  if (flags.seed) cfg["seed"] = *flags.seed;
  const int max_age = cfg.at("max_age").get<int>();
  if (max_age < 1) throw InputError("truth.max_age must be at least 1");
  if (cfg["inc"].is_null() || cfg["cf"].is_null()) throw InputError("truth: inc and cf rates are required");
  const Eigen::VectorXd inc = rate_curve(cfg["inc"], max_age, "inc");
  const Eigen::VectorXd cf = rate_curve(cfg["cf"], max_age, "cf");
  const Eigen::VectorXd rem = rate_curve(cfg["rem"], max_age, "rem");
  TrueRates truth;
  for (int a = 0; a <= max_age; ++a) truth.rates.push_back({inc(a), cf(a), rem(a)});

  Denominators denominators;
  for (const auto& name : cfg.at("outcomes").get<std::vector<std::string>>()) {
    const Outcome o = parse_outcome(name);
    const Json& d = cfg.at("denominator");
    double n = 0;
    if (d.is_number()) {
      n = d.get<double>();
    } else if (d.is_object() && d.contains(name)) {
      n = d.at(name).get<double>();
    } else {
      throw InputError(fmt::format("truth.denominator: no value for {}", name));
    }
    if (!(n >= 0)) throw InputError("truth.denominator: must be non-negative");
    denominators[static_cast<int>(o)] = Eigen::VectorXd::Constant(max_age + 1, n);
  }
  const ObservedCounts counts = synthesize_counts(truth, denominators, cfg.at("seed").get<std::uint64_t>());
  const ImpliedProbabilities probs = implied_probabilities(truth);

  const fs::path dir = flags.output;
  write_file(dir / "data.csv", [&](std::ostream& os) {
    write_prepared(os, {PreparedGroup{cfg.at("group").get<std::string>(), "", counts, 0}});
  });
  write_file(dir / "truth.csv", [&](std::ostream& os) {
    os << "age,inc,cf,rem,inc_prob,prev,mort,rem_prob\n";
    for (int a = 0; a <= max_age; ++a) {
      os << a << ',' << format_number(inc(a)) << ',' << format_number(cf(a)) << ',' << format_number(rem(a)) << ','
         << format_number(probs.inc(a)) << ',' << format_number(probs.prev(a)) << ',' << format_number(probs.mort(a))
         << ',' << format_number(probs.rem(a)) << '\n';
    }
  });
  out << fmt::format("simulated ages 0-{} written to {}\n", max_age, dir.string());
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian illness-death model for chronic disease epidemiology", "illdeath"};
  app.require_subcommand(1);

  PrepOptions prep;
  auto* prep_cmd = app.add_subcommand("prep", "Convert published estimates into yearly counts");
  prep_cmd->add_option("input", prep.input, "Input CSV")->required();
  prep_cmd->add_option("-o,--output", prep.output, "Output CSV (default: standard output)");
  prep_cmd->add_option("--weight", prep.weights, "Downweight an outcome, e.g. mort=0.5");
  prep_cmd->add_option("--max-objective", prep.max_objective, "Largest acceptable beta-fit objective");
  prep_cmd->add_option("--group-column", prep.group_column, "Area column name");
  prep_cmd->add_option("--gender-column", prep.gender_column, "Gender column name");

  FitFlags fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the model to prepared counts");
  fit_cmd->add_option("-c,--config", fit.config, "JSON configuration file");
  fit_cmd->add_option("-d,--data", fit.data, "Prepared CSV");
  fit_cmd->add_option("-o,--output", fit.output, "Output directory");
  fit_cmd->add_option("--method", fit.method, "opt or mcmc");
  fit_cmd->add_option("--cf-model", fit.cf_model, "smooth, increasing, const or indep");
  fit_cmd->add_option("--inc-model", fit.inc_model, "smooth, increasing, const or indep");
  fit_cmd->add_option("--rem-model", fit.rem_model, "zero, const or auto");
  fit_cmd->add_option("--cf-eqage", fit.cf_eqage, "Case fatality is constant below this age");
  fit_cmd->add_option("--inc-eqage", fit.inc_eqage, "Incidence is constant below this age");
  fit_cmd->add_option("--chains", fit.chains, "MCMC chains");
  fit_cmd->add_option("--warmup", fit.warmup, "MCMC warmup iterations per chain");
  fit_cmd->add_option("--iterations", fit.iterations, "MCMC draws kept per chain");
  fit_cmd->add_option("--metric", fit.metric, "MCMC metric: diag or dense");
  fit_cmd->add_option("--laplace-draws", fit.laplace_draws, "Draws from the normal approximation");
  fit_cmd->add_option("--seed", fit.seed, "Random seed");
  fit_cmd->add_option("--threads", fit.threads, "Worker threads (default: all cores)");
  fit_cmd->add_option("--inc-trend", fit.inc_trend, "Incidence trend CSV");
  fit_cmd->add_option("--cf-trend", fit.cf_trend, "Case fatality trend CSV");
  fit_cmd->add_option("--hp-fixed", fit.hp_fixed, "Fix a hyperparameter, e.g. lambda_cf=0.5");
  fit_cmd->add_flag("--hierarchical", fit.hierarchical, "Pool areas in a hierarchical model");
  fit_cmd->add_flag("--plot-data", fit.plot_data, "Also write plot-ready CSVs");

  LooFlags loo;
  auto* loo_cmd = app.add_subcommand("loo", "Compare fits by leave-one-out cross-validation");
  loo_cmd->add_option("fits", loo.inputs, "Fit output directories or loo.csv files")->required();
  loo_cmd->add_option("--labels", loo.labels, "Comma-separated model labels");
  loo_cmd->add_option("--outcome", loo.outcome, "Only this outcome (inc, prev, mort, rem)");
  loo_cmd->add_option("--age-min", loo.age_min, "Youngest age included");
  loo_cmd->add_option("--age-max", loo.age_max, "Oldest age included");
  loo_cmd->add_option("-o,--output", loo.output, "Output CSV (default: standard output)");

  SimulateFlags sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate synthetic counts from known rates");
  sim_cmd->add_option("-c,--config", sim.config, "JSON truth configuration")->required();
  sim_cmd->add_option("-o,--output", sim.output, "Output directory")->required();
  sim_cmd->add_option("--seed", sim.seed, "Random seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (prep_cmd->parsed()) return cmd_prep(prep, out);
    if (fit_cmd->parsed()) return cmd_fit(fit, out, err);
    if (loo_cmd->parsed()) return cmd_loo(loo, out);
    if (sim_cmd->parsed()) return cmd_simulate(sim, out);
  } catch (const ConvergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConvergence;
  } catch (const NonIdentifiableError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConvergence;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    err << "error: configuration: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace illdeath
