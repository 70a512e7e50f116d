#include "illdeath/cli.hpp"
#include "illdeath/io.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace illdeath;
namespace fs = std::filesystem;

namespace {

const fs::path kData = "data";
const fs::path kGolden = kData / "golden";

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("illdeath-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  std::string str(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in, "cannot open " << p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

/// Numeric cells agree to 6 decimals; text cells agree exactly.
void check_tables_match(const CsvTable& got, const CsvTable& want) {
  REQUIRE(got.header() == want.header());
  REQUIRE(got.rows() == want.rows());
  for (std::size_t r = 0; r < want.rows(); ++r) {
    for (std::size_t c = 0; c < want.header().size(); ++c) {
      const std::string& w = want.cell(r, c);
      double wv = 0;
      std::istringstream ws(w);
      if (ws >> wv && ws.eof()) {
        const double gv = std::stod(got.cell(r, c));
        CHECK_MESSAGE(std::abs(gv - wv) < 1e-6 * std::max(1.0, std::abs(wv)),
                      "row " << r + 2 << " column " << want.header()[c] << ": " << got.cell(r, c) << " vs " << w);
      } else {
        CHECK(got.cell(r, c) == w);
      }
    }
  }
}

std::string trend_csv(int max_age, double value) {
  std::ostringstream s;
  s << "age";
  for (int y = 0; y <= 100; ++y) s << ",y" << y;
  s << '\n';
  for (int a = 0; a <= max_age; ++a) {
    s << a;
    for (int y = 0; y <= 100; ++y) s << ',' << value;
    s << '\n';
  }
  return s.str();
}

const char* kSmallTruth = R"({"max_age": 30, "seed": 3, "denominator": 20000,
  "inc": {"intercept": -5.0, "slope": 0.03}, "cf": {"intercept": -3.5, "slope": 0.02}})";

}  // namespace

TEST_CASE("usage errors and help") {
  CHECK(cli({}).code == kExitInput);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"frobnicate"}).code == kExitInput);
  CHECK(cli({"fit", "--output", "x"}).code == kExitInput);
  CHECK(cli({"loo", "only-one"}).code == kExitInput);
  CHECK(cli({"prep", "does-not-exist.csv"}).code == kExitInput);

  TempDir tmp;
  write(tmp / "bad.json", R"({"method": "opt", "chainz": 4})");
  const Run r = cli({"fit", "-c", tmp.str("bad.json"), "-d", (kGolden / "synth" / "data.csv").string(), "-o",
                     tmp.str("out")});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("chainz") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp / "out"));

  write(tmp / "bad_prior.json", R"({"prior": {"slope_sd": 1, "typo": 2}})");
  CHECK(cli({"fit", "-c", tmp.str("bad_prior.json"), "-d", "x.csv", "-o", tmp.str("out")}).code == kExitInput);
  CHECK(cli({"fit", "-d", (kGolden / "synth" / "data.csv").string(), "-o", tmp.str("out"), "--metric", "full"}).code ==
        kExitInput);
}

TEST_CASE("simulate regenerates the golden synthetic dataset") {
  TempDir tmp;
  const Run r = cli({"simulate", "-c", (kData / "synth-ihd-like.json").string(), "-o", tmp.str("synth")});
  REQUIRE(r.code == kExitOk);
  CHECK(slurp(tmp / "synth" / "data.csv") == slurp(kGolden / "synth" / "data.csv"));
  CHECK(slurp(tmp / "synth" / "truth.csv") == slurp(kGolden / "synth" / "truth.csv"));

  REQUIRE(cli({"simulate", "-c", (kData / "synth-ihd-like.json").string(), "-o", tmp.str("other"), "--seed", "9"})
              .code == kExitOk);
  CHECK(slurp(tmp / "other" / "data.csv") != slurp(kGolden / "synth" / "data.csv"));
  CHECK(slurp(tmp / "other" / "truth.csv") == slurp(kGolden / "synth" / "truth.csv"));
}

TEST_CASE("simulate with zero denominators") {
  TempDir tmp;
  write(tmp / "truth.json", R"({"max_age": 20, "denominator": 0, "inc": 0.01, "cf": 0.05})");
  REQUIRE(cli({"simulate", "-c", tmp.str("truth.json"), "-o", tmp.str("sim")}).code == kExitOk);
  const CsvTable t = CsvTable::read(tmp / "sim" / "data.csv");
  CHECK(t.rows() == 21);
  for (const char* col : {"inc_num", "inc_denom", "prev_num", "prev_denom", "mort_num", "mort_denom"}) {
    for (std::size_t r = 0; r < t.rows(); ++r) CHECK(t.required_number(r, t.column(col)) == 0);
  }

  write(tmp / "bad.json", R"({"inc": 0.01, "cf": {"slope": 0.1}})");
  CHECK(cli({"simulate", "-c", tmp.str("bad.json"), "-o", tmp.str("sim2")}).code == kExitInput);
}

TEST_CASE("prep reproduces the golden prepared file") {
  TempDir tmp;
  const Run r = cli({"prep", (kData / "prep_input.csv").string(), "-o", tmp.str("prepared.csv")});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(slurp(tmp / "prepared.csv") == slurp(kGolden / "prepared.csv"));

  // Yearly numerators add up to each five-year group's total.
  const CsvTable in = CsvTable::read(kData / "prep_input.csv");
  const CsvTable out = CsvTable::read(tmp / "prepared.csv");
  for (std::size_t r = 0; r < in.rows(); ++r) {
    const int lo = in.integer(r, in.column("age_lo")), hi = in.integer(r, in.column("age_hi"));
    const std::string group = in.cell(r, in.column("group"));
    double sum = 0;
    for (std::size_t k = 0; k < out.rows(); ++k) {
      const int age = out.integer(k, out.column("age"));
      if (out.cell(k, out.column("group")) == group && age >= lo && age <= hi) {
        sum += out.required_number(k, out.column("mort_num"));
      }
    }
    CHECK(sum == doctest::Approx(in.required_number(r, in.column("mort_num"))).epsilon(1e-9));
  }
}

TEST_CASE("prep of a symmetric interval") {
  TempDir tmp;
  write(tmp / "in.csv", "age,prev_est,prev_lo,prev_hi\n50,0.5,0.3,0.7\n");
  const Run r = cli({"prep", tmp.str("in.csv")});
  REQUIRE(r.code == kExitOk);
  const CsvTable t = CsvTable::parse(r.out);
  const double num = t.required_number(0, t.column("prev_num"));
  const double denom = t.required_number(0, t.column("prev_denom"));
  CHECK(std::abs(num / denom - 0.5) < 0.005 * 0.5);
  CHECK(t.cell(0, t.column("age")) == "50");
}

TEST_CASE("prep input errors name the file and line") {
  TempDir tmp;
  write(tmp / "in.csv", "age,mort_num,mort_denom\n40,5,100\n41,120,100\n");
  const Run r = cli({"prep", tmp.str("in.csv")});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("in.csv:3") != std::string::npos);

  write(tmp / "gap.csv", "age_lo,age_hi,mort_num,mort_denom\n40,44,5,100\n50,54,5,100\n");
  CHECK(cli({"prep", tmp.str("gap.csv")}).code == kExitInput);
  CHECK(cli({"prep", tmp.str("in.csv"), "--weight", "mort=2"}).code == kExitInput);
}

TEST_CASE("opt fit on the golden dataset matches the golden tidy table") {
  TempDir tmp;
  const std::string data = (kGolden / "synth" / "data.csv").string();
  const Run r = cli({"fit", "-d", data, "-o", tmp.str("fit"), "--threads", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  check_tables_match(CsvTable::read(tmp / "fit" / "tidy.csv"), CsvTable::read(kGolden / "opt_tidy.csv"));

  const auto diag = read_json(tmp / "fit" / "diagnostics.json");
  CHECK(diag["method"] == "opt");
  CHECK(diag["converged"] == true);
  CHECK(diag["fits"][0]["gradient_norm"].get<double>() < 1e-2);
  CHECK(diag["fits"][0].contains("hessian_condition"));
  CHECK(fs::exists(tmp / "fit" / "check.csv"));
  CHECK_FALSE(fs::exists(tmp / "fit" / "loo.csv"));

  SUBCASE("reruns are byte-identical") {
    REQUIRE(cli({"fit", "-d", data, "-o", tmp.str("again"), "--threads", "1"}).code == kExitOk);
    CHECK(slurp(tmp / "fit" / "tidy.csv") == slurp(tmp / "again" / "tidy.csv"));
  }
  SUBCASE("plot data") {
    REQUIRE(cli({"fit", "-d", data, "-o", tmp.str("plot"), "--threads", "1", "--plot-data"}).code == kExitOk);
    for (const char* var : {"cf", "inc", "rem", "prev", "mort", "inc_prob", "observed"}) {
      CHECK(fs::exists(tmp / "plot" / "plot" / (std::string(var) + ".csv")));
    }
    const CsvTable cf = CsvTable::read(tmp / "plot" / "plot" / "cf.csv");
    CHECK(cf.rows() == 100);
    CHECK(cf.find("lo").has_value());
  }
}

TEST_CASE("flags override the config file, which overrides defaults") {
  TempDir tmp;
  write(tmp / "truth.json", kSmallTruth);
  REQUIRE(cli({"simulate", "-c", tmp.str("truth.json"), "-o", tmp.str("sim")}).code == kExitOk);
  write(tmp / "config.json", R"({"method": "mcmc", "seed": 5, "laplace_draws": 50, "cf_model": "const"})");
  const Run r = cli({"fit", "-c", tmp.str("config.json"), "-d", tmp.str("sim/data.csv"), "-o", tmp.str("fit"),
                     "--method", "opt", "--threads", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const auto cfg = read_json(tmp / "fit" / "diagnostics.json")["config"];
  CHECK(cfg["method"] == "opt");
  CHECK(cfg["seed"] == 5);
  CHECK(cfg["laplace_draws"] == 50);
  CHECK(cfg["cf_model"] == "const");
  CHECK(cfg["chains"] == 4);
  CHECK(cfg["metric"] == "diag");
}

TEST_CASE("mcmc diagnostics report R-hat per parameter") {
  TempDir tmp;
  write(tmp / "truth.json", kSmallTruth);
  REQUIRE(cli({"simulate", "-c", tmp.str("truth.json"), "-o", tmp.str("sim")}).code == kExitOk);
  const Run r = cli({"fit", "-d", tmp.str("sim/data.csv"), "-o", tmp.str("fit"), "--method", "mcmc", "--cf-model",
                     "const", "--inc-model", "const", "--chains", "2", "--warmup", "200", "--iterations", "200",
                     "--threads", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const auto fit = read_json(tmp / "fit" / "diagnostics.json")["fits"][0];
  REQUIRE(fit["rhat"].is_object());
  CHECK(fit["rhat"].contains("cf_lograte"));
  CHECK(fit["rhat"].contains("inc_lograte"));
  for (const auto& [name, value] : fit["rhat"].items()) CHECK(value.get<double>() < 1.1);
  CHECK(fit["ess"].size() == fit["rhat"].size());
  CHECK(fit["step_sizes"].size() == 2);
  CHECK_FALSE(fs::exists(tmp / "fit" / "loo.csv"));
}

TEST_CASE("trend files tag the check table with the data year") {
  TempDir tmp;
  write(tmp / "truth.json", kSmallTruth);
  REQUIRE(cli({"simulate", "-c", tmp.str("truth.json"), "-o", tmp.str("sim")}).code == kExitOk);
  write(tmp / "trend.csv", trend_csv(30, 1.0));
  REQUIRE(cli({"fit", "-d", tmp.str("sim/data.csv"), "-o", tmp.str("plain"), "--threads", "1"}).code == kExitOk);
  REQUIRE(cli({"fit", "-d", tmp.str("sim/data.csv"), "-o", tmp.str("trend"), "--threads", "1", "--inc-trend",
               tmp.str("trend.csv")})
              .code == kExitOk);
  const CsvTable plain = CsvTable::read(tmp / "plain" / "check.csv");
  const CsvTable trend = CsvTable::read(tmp / "trend" / "check.csv");
  REQUIRE(plain.rows() == trend.rows());
  for (std::size_t r = 0; r < plain.rows(); ++r) {
    CHECK(plain.cell(r, plain.column("data_year")) == "false");
    CHECK(trend.cell(r, trend.column("data_year")) == "true");
  }

  write(tmp / "short.csv", trend_csv(10, 1.0));
  CHECK(cli({"fit", "-d", tmp.str("sim/data.csv"), "-o", tmp.str("bad"), "--inc-trend", tmp.str("short.csv")}).code ==
        kExitInput);
}

TEST_CASE("gender needs a hierarchical model") {
  TempDir tmp;
  std::ostringstream csv;
  csv << "age,group,gender,mort_num,mort_denom,prev_num,prev_denom\n";
  for (const char* g : {"female", "male"}) {
    for (int a = 0; a <= 5; ++a) csv << a << ",all," << g << ",1,1000,10,1000\n";
  }
  write(tmp / "data.csv", csv.str());
  const Run r = cli({"fit", "-d", tmp.str("data.csv"), "-o", tmp.str("fit")});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("hierarchical") != std::string::npos);
}

TEST_CASE("an unidentified model exits with the convergence code") {
  TempDir tmp;
  std::ostringstream csv;
  csv << "age,mort_num,mort_denom,prev_num,prev_denom\n";
  for (int a = 0; a <= 20; ++a) csv << a << ",0,0,0,0\n";
  write(tmp / "data.csv", csv.str());
  write(tmp / "config.json", R"({"prior": {"intercept_sd": 1e5}})");
  const Run r = cli({"fit", "-c", tmp.str("config.json"), "-d", tmp.str("data.csv"), "-o", tmp.str("fit"),
                     "--threads", "1"});
  CHECK(r.code == kExitConvergence);
  const auto diag = read_json(tmp / "fit" / "diagnostics.json");
  CHECK(diag["converged"] == false);
  CHECK(diag["fits"][0].contains("parameter"));
}

TEST_CASE("loo comparisons") {
  TempDir tmp;
  const std::string a = (kGolden / "loo_smooth.csv").string();
  const std::string b = (kGolden / "loo_eqage30.csv").string();

  SUBCASE("a fit against itself") {
    const Run r = cli({"loo", a, a, "--labels", "m1,m1again"});
    REQUIRE(r.code == kExitOk);
    const CsvTable t = CsvTable::parse(r.out);
    REQUIRE(t.rows() == 2);
    CHECK(t.required_number(1, t.column("looic_diff")) == 0);
  }
  SUBCASE("golden comparison") {
    const Run r = cli({"loo", a, b, "--labels", "smooth,eqage30", "-o", tmp.str("cmp.csv")});
    REQUIRE(r.code == kExitOk);
    CHECK(slurp(tmp / "cmp.csv") == slurp(kGolden / "loo_comparison.csv"));
  }
  SUBCASE("mortality between ages 50 and 90") {
    const Run r = cli({"loo", a, b, "--outcome", "mort", "--age-min", "50", "--age-max", "90"});
    REQUIRE(r.code == kExitOk);
    const CsvTable t = CsvTable::parse(r.out);
    const double used = t.required_number(0, t.column("n_used"));
    const double unreliable = t.required_number(0, t.column("n_unreliable"));
    CHECK(used + unreliable == 41);
  }
  SUBCASE("fits over different observations") {
    std::string text = slurp(a);
    const auto first_row = text.find('\n') + 1;
    text.erase(first_row, text.find('\n', first_row) + 1 - first_row);
    write(tmp / "short.csv", text);
    CHECK(cli({"loo", a, tmp.str("short.csv")}).code == kExitInput);
  }
}
