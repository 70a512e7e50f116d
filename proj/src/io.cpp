#include "illdeath/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace illdeath {

namespace {

std::vector<std::string> split_line(const std::string& line, const std::string& source, std::size_t line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  if (quoted) throw InputError(fmt::format("{}:{}: unterminated quote", source, line_no));
  for (auto& f : fields) {
    const auto first = f.find_first_not_of(" \t");
    const auto last = f.find_last_not_of(" \t");
    f = first == std::string::npos ? "" : f.substr(first, last - first + 1);
  }
  return fields;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

CsvTable CsvTable::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot open {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

CsvTable CsvTable::parse(const std::string& text, std::string source) {
  CsvTable t;
  t.source_ = std::move(source);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = split_line(line, t.source_, line_no);
    if (t.header_.empty()) {
      std::set<std::string> seen;
      for (const auto& h : fields) {
        if (h.empty()) throw InputError(fmt::format("{}:{}: empty column name", t.source_, line_no));
        if (!seen.insert(h).second) throw InputError(fmt::format("{}:{}: duplicate column '{}'", t.source_, line_no, h));
      }
      t.header_ = std::move(fields);
      continue;
    }
    if (fields.size() != t.header_.size()) {
      throw InputError(fmt::format("{}:{}: expected {} fields, found {}", t.source_, line_no, t.header_.size(),
                                   fields.size()));
    }
    t.cells_.push_back(std::move(fields));
  }
  if (t.header_.empty()) throw InputError(fmt::format("{}: missing header row", t.source_));
  return t;
}

std::optional<std::size_t> CsvTable::find(const std::string& column) const {
  const auto it = std::find(header_.begin(), header_.end(), column);
  if (it == header_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - header_.begin());
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto c = find(name);
  if (!c) throw InputError(fmt::format("{}: missing column '{}'", source_, name));
  return *c;
}

std::optional<double> CsvTable::number(std::size_t row, std::size_t col) const {
  const std::string& s = cells_[row][col];
  if (s.empty() || s == "NA") return std::nullopt;
  double x = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(x)) {
    throw InputError(fmt::format("{}:{}: column '{}': '{}' is not a number", source_, row + 2, header_[col], s));
  }
  return x;
}

double CsvTable::required_number(std::size_t row, std::size_t col) const {
  const auto x = number(row, col);
  if (!x) throw InputError(fmt::format("{}:{}: column '{}' is empty", source_, row + 2, header_[col]));
  return *x;
}

int CsvTable::integer(std::size_t row, std::size_t col) const {
  const double x = required_number(row, col);
  if (x != std::floor(x) || std::abs(x) > 1e6) {
    throw InputError(fmt::format("{}:{}: column '{}': {} is not a whole number", source_, row + 2, header_[col], x));
  }
  return static_cast<int>(x);
}

std::string format_number(double x) { return fmt::format("{}", x); }

CountColumns::CountColumns() {
  for (Outcome o : kOutcomes) names[o] = {to_string(o) + "_num", to_string(o) + "_denom"};
}

std::vector<PreparedGroup> read_prepared(const CsvTable& t, const CountColumns& columns, const std::string& group_column,
                                         const std::string& gender_column) {
  const std::size_t age_col = t.column("age");
  const auto group_col = t.find(group_column);
  const auto gender_col = t.find(gender_column);
  std::map<Outcome, std::pair<std::size_t, std::size_t>> present;
  for (Outcome o : kOutcomes) {
    const auto num = t.find(columns.num(o));
    const auto denom = t.find(columns.denom(o));
    if (num.has_value() != denom.has_value()) {
      throw InputError(fmt::format("{}: column '{}' needs its partner '{}'", t.source(),
                                   num ? columns.num(o) : columns.denom(o), num ? columns.denom(o) : columns.num(o)));
    }
    if (num) present[o] = {*num, *denom};
  }
  if (present.empty()) throw InputError(fmt::format("{}: no outcome count columns", t.source()));
  if (t.rows() == 0) throw InputError(fmt::format("{}: no data rows", t.source()));

  int max_age = 0;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const int age = t.integer(r, age_col);
    if (age < 0) throw InputError(fmt::format("{}:{}: negative age", t.source(), r + 2));
    max_age = std::max(max_age, age);
  }

  std::vector<PreparedGroup> groups;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::set<std::tuple<std::string, std::string, int>> seen;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const std::string group = group_col ? t.cell(r, *group_col) : "all";
    const std::string gender = gender_col ? t.cell(r, *gender_col) : "";
    auto [it, added] = index.try_emplace({group, gender}, groups.size());
    if (added) {
      PreparedGroup g{group, gender, ObservedCounts(max_age), max_age};
      for (const auto& [o, cols] : present) {
        g.counts.set(o, Eigen::VectorXd::Zero(max_age + 1), Eigen::VectorXd::Zero(max_age + 1));
      }
      groups.push_back(std::move(g));
    }
    const int age = t.integer(r, age_col);
    if (!seen.insert({group, gender, age}).second) {
      throw InputError(fmt::format("{}:{}: age {} repeated for group '{}'", t.source(), r + 2, age, group));
    }
    groups[it->second].first_age = std::min(groups[it->second].first_age, age);
    auto& counts = groups[it->second].counts;
    for (const auto& [o, cols] : present) {
      const auto y = t.number(r, cols.first);
      const auto n = t.number(r, cols.second);
      if (y.has_value() != n.has_value()) {
        throw InputError(fmt::format("{}:{}: '{}' and '{}' must both be given or both be empty", t.source(), r + 2,
                                     columns.num(o), columns.denom(o)));
      }
      if (!y) continue;
      if (!(*n >= 0 && *y >= 0 && *y <= *n)) {
        throw InputError(fmt::format("{}:{}: '{}' = {} and '{}' = {} violate 0 <= num <= denom", t.source(), r + 2,
                                     columns.num(o), *y, columns.denom(o), *n));
      }
      auto& s = *counts.series[static_cast<int>(o)];
      s.y(age) = *y;
      s.n(age) = *n;
    }
  }
  return groups;
}

void write_prepared(std::ostream& out, const std::vector<PreparedGroup>& groups) {
  if (groups.empty()) return;
  std::vector<Outcome> outcomes;
  for (Outcome o : kOutcomes) {
    if (groups.front().counts.has(o)) outcomes.push_back(o);
  }
  out << "age,group,gender";
  for (Outcome o : outcomes) out << ',' << to_string(o) << "_num," << to_string(o) << "_denom";
  out << '\n';
  for (const auto& g : groups) {
    for (int a = g.first_age; a <= g.counts.max_age; ++a) {
      out << a << ',' << csv_field(g.group) << ',' << csv_field(g.gender);
      for (Outcome o : outcomes) {
        const auto& s = g.counts.get(o);
        out << ',' << format_number(s.y(a)) << ',' << format_number(s.n(a));
      }
      out << '\n';
    }
  }
}

TrendMatrix read_trend(const std::filesystem::path& path) {
  const CsvTable t = CsvTable::read(path);
  const auto age_col = t.find("age");
  const std::size_t n_cols = t.header().size() - (age_col ? 1 : 0);
  if (n_cols != static_cast<std::size_t>(kDataYear) + 1) {
    throw InputError(fmt::format("{}: expected {} year columns, found {}", t.source(), kDataYear + 1, n_cols));
  }
  TrendMatrix m(static_cast<Eigen::Index>(t.rows()), kDataYear + 1);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    Eigen::Index j = 0;
    for (std::size_t c = 0; c < t.header().size(); ++c) {
      if (age_col && c == *age_col) continue;
      const double x = t.required_number(r, c);
      if (!(x > 0)) throw InputError(fmt::format("{}:{}: trend ratios must be positive", t.source(), r + 2));
      m(static_cast<Eigen::Index>(r), j++) = x;
    }
  }
  return m;
}

void write_tidy(std::ostream& out, const TidyTable& table) {
  out << "var,age,group,gender,point";
  for (const auto& c : table.quantile_columns()) out << ',' << c;
  out << '\n';
  for (const auto& r : table.rows) {
    out << r.var << ',' << r.age << ',' << csv_field(r.group) << ',' << csv_field(r.gender) << ','
        << format_number(r.point);
    for (double q : r.q) out << ',' << format_number(q);
    out << '\n';
  }
}

void write_check(std::ostream& out, const std::vector<CheckRow>& rows) {
  out << "outcome,age,group,gender,num,denom,observed,fitted,lo,hi,conflict_p,data_year\n";
  for (const auto& r : rows) {
    out << to_string(r.outcome) << ',' << r.age << ',' << csv_field(r.group) << ',' << csv_field(r.gender) << ','
        << format_number(r.y) << ',' << format_number(r.n) << ',' << format_number(r.observed) << ','
        << format_number(r.fitted) << ',' << format_number(r.lo) << ',' << format_number(r.hi) << ','
        << format_number(r.conflict_p) << ',' << (r.data_year ? "true" : "false") << '\n';
  }
}

void write_loo(std::ostream& out, const LooResult& loo) {
  out << "outcome,age,group,gender,elpd,khat,lpd,unreliable\n";
  for (int i = 0; i < loo.size(); ++i) {
    const auto& k = loo.keys[i];
    out << to_string(k.outcome) << ',' << k.age << ',' << csv_field(k.group) << ',' << csv_field(k.gender) << ','
        << format_number(loo.elpd(i)) << ',' << format_number(loo.khat(i)) << ',' << format_number(loo.lpd(i)) << ','
        << (loo.flagged(i) ? "true" : "false") << '\n';
  }
}

LooResult read_loo(const CsvTable& t) {
  const std::size_t outcome = t.column("outcome"), age = t.column("age"), group = t.column("group"),
                    gender = t.column("gender"), elpd = t.column("elpd"), khat = t.column("khat"),
                    lpd = t.column("lpd");
  LooResult loo;
  const auto n = static_cast<Eigen::Index>(t.rows());
  loo.elpd.resize(n);
  loo.khat.resize(n);
  loo.lpd.resize(n);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    Outcome o;
    try {
      o = parse_outcome(t.cell(r, outcome));
    } catch (const std::invalid_argument& e) {
      throw InputError(fmt::format("{}:{}: {}", t.source(), r + 2, e.what()));
    }
    loo.keys.push_back({o, t.integer(r, age), t.cell(r, group), t.cell(r, gender)});
    const auto i = static_cast<Eigen::Index>(r);
    loo.elpd(i) = t.required_number(r, elpd);
    loo.khat(i) = t.required_number(r, khat);
    loo.lpd(i) = t.required_number(r, lpd);
  }
  return loo;
}

void write_comparison(std::ostream& out, const LooComparison& cmp) {
  out << "model,elpd,looic,looic_diff,se_diff,n_used,n_unreliable,n_filtered\n";
  for (const auto& r : cmp.rows) {
    out << csv_field(r.label) << ',' << format_number(r.elpd) << ',' << format_number(r.looic) << ','
        << format_number(r.diff) << ',' << format_number(r.se_diff) << ',' << cmp.n_used << ',' << cmp.n_unreliable
        << ',' << cmp.n_filtered << '\n';
  }
}

}  // namespace illdeath
