#pragma once

#include "illdeath/checking.hpp"
#include "illdeath/disease_process.hpp"
#include "illdeath/inference.hpp"
#include "illdeath/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace illdeath {

/// Malformed input file; the message carries the file, row and column.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Comma-separated table with a header row. Fields may be double-quoted.
class CsvTable {
 public:
  static CsvTable read(const std::filesystem::path& path);
  static CsvTable parse(const std::string& text, std::string source = "<text>");

  const std::string& source() const { return source_; }
  const std::vector<std::string>& header() const { return header_; }
  std::size_t rows() const { return cells_.size(); }
  std::optional<std::size_t> find(const std::string& column) const;
  std::size_t column(const std::string& column) const;  // throws InputError when absent
  const std::string& cell(std::size_t row, std::size_t col) const { return cells_[row][col]; }

  /// Parses a number; an empty cell is std::nullopt. Row numbers in
  /// messages count the header as line 1.
  std::optional<double> number(std::size_t row, std::size_t col) const;
  double required_number(std::size_t row, std::size_t col) const;
  int integer(std::size_t row, std::size_t col) const;

 private:
  std::string source_;
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> cells_;
};

/// Numbers printed with enough digits to round-trip through the CSV.
std::string format_number(double x);

/// Column names for the numerator and denominator of each outcome.
struct CountColumns {
  std::map<Outcome, std::pair<std::string, std::string>> names;

  CountColumns();
  const std::string& num(Outcome o) const { return names.at(o).first; }
  const std::string& denom(Outcome o) const { return names.at(o).second; }
};

/// Counts for one area and gender read from a prepared file.
struct PreparedGroup {
  std::string group;
  std::string gender;
  ObservedCounts counts;
  int first_age = 0;  // rows are written from this age on
};

/// Rows of a prepared file grouped by area and gender in order of first
/// appearance. Ages absent from a group get zero denominators, and an
/// outcome whose columns are missing is absent.
std::vector<PreparedGroup> read_prepared(const CsvTable& table, const CountColumns& columns = {},
                                         const std::string& group_column = "group",
                                         const std::string& gender_column = "gender");

void write_prepared(std::ostream& out, const std::vector<PreparedGroup>& groups);

/// Trend ratios with one row per age and a column per year 0..100. A header
/// row is required; an optional leading "age" column is ignored.
TrendMatrix read_trend(const std::filesystem::path& path);

void write_tidy(std::ostream& out, const TidyTable& table);
void write_check(std::ostream& out, const std::vector<CheckRow>& rows);
void write_loo(std::ostream& out, const LooResult& loo);
LooResult read_loo(const CsvTable& table);
void write_comparison(std::ostream& out, const LooComparison& cmp);

}  // namespace illdeath
