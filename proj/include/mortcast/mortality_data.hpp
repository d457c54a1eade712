#ifndef MORTCAST_MORTALITY_DATA_HPP
#define MORTCAST_MORTALITY_DATA_HPP

// Ingestion of raw mortality tables and construction of logit-scale
// age x year surfaces.

#include <Eigen/Dense>

#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mortcast/error.hpp"
#include "mortcast/numeric_format.hpp"

namespace mortcast {

enum class TableFormat { Hmd1x1, Csv };
enum class Sex { Female, Male, Total };
enum class RateKind { Central, Initial };

inline std::optional<TableFormat> table_format_from_string(std::string_view s) {
  if (s == "hmd_1x1") return TableFormat::Hmd1x1;
  if (s == "csv") return TableFormat::Csv;
  return std::nullopt;
}

inline std::optional<Sex> sex_from_string(std::string_view s) {
  if (s == "female") return Sex::Female;
  if (s == "male") return Sex::Male;
  if (s == "total") return Sex::Total;
  return std::nullopt;
}

inline std::string_view to_string(Sex s) {
  switch (s) {
    case Sex::Female: return "female";
    case Sex::Male: return "male";
    case Sex::Total: return "total";
  }
  return "total";
}

/// Inclusive integer range, written "lo:hi" on the command line.
struct IntRange {
  int lo = 0;
  int hi = 0;

  int size() const { return hi - lo + 1; }
  bool contains(int v) const { return v >= lo && v <= hi; }
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

inline IntRange parse_range(std::string_view text) {
  const auto colon = text.find(':');
  IntRange r;
  if (colon == std::string_view::npos || !parse_int(trim(text.substr(0, colon)), r.lo) ||
      !parse_int(trim(text.substr(colon + 1)), r.hi)) {
    fail(ErrorCode::InvalidArgument, "range '" + std::string(text) + "' is not of the form lo:hi");
  }
  if (r.lo > r.hi) {
    fail(ErrorCode::InvalidArgument,
         "range '" + std::string(text) + "' has lo > hi (" + std::to_string(r.lo) + " > " +
             std::to_string(r.hi) + ")");
  }
  return r;
}

struct TableRow {
  int year = 0;
  int age = 0;
  double rate = 0.0;  // central rate m, or initial rate q for RateKind::Initial tables
  std::optional<double> deaths;
  std::optional<double> exposure;
};

/// Rows keyed by (year, age); construction enforces uniqueness and D/E consistency.
class RawMortalityTable {
 public:
  RawMortalityTable() = default;

  RawMortalityTable(RateKind kind, std::vector<TableRow> rows) : kind_(kind), rows_(std::move(rows)) {
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      const auto& r = rows_[k];
      if (!index_.emplace(std::pair{r.year, r.age}, k).second) {
        fail(ErrorCode::DuplicateCell,
             "year " + std::to_string(r.year) + ", age " + std::to_string(r.age) + " appears twice");
      }
      if (kind_ == RateKind::Central && r.deaths && r.exposure && *r.exposure > 0.0) {
        const double implied = *r.deaths / *r.exposure;
        if (std::abs(r.rate - implied) > 1e-6 * std::max(r.rate, 1e-12)) {
          fail(ErrorCode::InconsistentRow,
               "year " + std::to_string(r.year) + ", age " + std::to_string(r.age) +
                   ": rate " + format_full(r.rate) + " != deaths/exposure " + format_full(implied));
        }
      }
    }
  }

  RateKind kind() const { return kind_; }
  const std::vector<TableRow>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  const TableRow* find(int year, int age) const {
    auto it = index_.find({year, age});
    return it == index_.end() ? nullptr : &rows_[it->second];
  }

 private:
  RateKind kind_ = RateKind::Central;
  std::vector<TableRow> rows_;
  std::map<std::pair<int, int>, std::size_t> index_;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                         : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string line_error(std::size_t line_no, std::string_view what) {
  return "line " + std::to_string(line_no) + ": " + std::string(what);
}

inline int parse_age_token(std::string_view tok, std::size_t line_no) {
  if (!tok.empty() && tok.back() == '+') tok.remove_suffix(1);
  int age = 0;
  if (!parse_int(tok, age) || age < 0) {
    fail(ErrorCode::MalformedLine, line_error(line_no, "bad age '" + std::string(tok) + "'"));
  }
  return age;
}

}  // namespace detail

/// One HMD 1x1 record (Mx, Deaths or Exposures file); nullopt marks a "." cell.
struct HmdRecord {
  int year = 0;
  int age = 0;
  std::optional<double> female, male, total;

  std::optional<double> column(Sex s) const {
    switch (s) {
      case Sex::Female: return female;
      case Sex::Male: return male;
      case Sex::Total: return total;
    }
    return total;
  }
};

/// Parses any HMD "1x1" whitespace-column file (Year Age Female Male Total).
inline std::vector<HmdRecord> parse_hmd_records(std::istream& in) {
  std::vector<HmdRecord> out;
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  bool any_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    any_content = true;
    if (!seen_header) {
      if (toks.size() >= 2 && toks[0] == "Year" && toks[1] == "Age") {
        if (toks.size() != 5 || toks[2] != "Female" || toks[3] != "Male" || toks[4] != "Total") {
          for (std::size_t k = 2; k < toks.size(); ++k) {
            if (toks[k] != "Female" && toks[k] != "Male" && toks[k] != "Total") {
              fail(ErrorCode::UnknownColumn,
                   detail::line_error(line_no, "unknown column '" + std::string(toks[k]) + "'"));
            }
          }
          fail(ErrorCode::MalformedLine,
               detail::line_error(line_no, "expected columns Year Age Female Male Total"));
        }
        seen_header = true;
      }
      continue;  // title / blank / preamble lines
    }
    if (toks.size() != 5) {
      fail(ErrorCode::MalformedLine,
           detail::line_error(line_no, "expected 5 columns, found " + std::to_string(toks.size())));
    }
    HmdRecord rec;
    if (!parse_int(toks[0], rec.year)) {
      fail(ErrorCode::MalformedLine,
           detail::line_error(line_no, "bad year '" + std::string(toks[0]) + "'"));
    }
    rec.age = detail::parse_age_token(toks[1], line_no);
    std::optional<double>* cols[3] = {&rec.female, &rec.male, &rec.total};
    for (int c = 0; c < 3; ++c) {
      const auto tok = toks[2 + c];
      if (tok == ".") continue;
      double v = 0.0;
      if (!parse_double(tok, v)) {
        fail(ErrorCode::MalformedLine,
             detail::line_error(line_no, "bad value '" + std::string(tok) + "'"));
      }
      *cols[c] = v;
    }
    out.push_back(rec);
  }
  if (!any_content) fail(ErrorCode::EmptyInput, "input stream is empty");
  if (!seen_header) fail(ErrorCode::MalformedLine, "no 'Year Age Female Male Total' header found");
  return out;
}

inline RawMortalityTable parse_hmd_1x1(std::istream& in, Sex sex) {
  std::vector<TableRow> rows;
  for (const auto& rec : parse_hmd_records(in)) {
    const auto v = rec.column(sex);
    if (!v) continue;
    rows.push_back({rec.year, rec.age, *v, std::nullopt, std::nullopt});
  }
  return RawMortalityTable(RateKind::Central, std::move(rows));
}

/// CSV with header year,age,mx (or qx), optionally followed by deaths and exposure columns.
inline RawMortalityTable parse_csv_table(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> header;
  std::string header_line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header_line = line;
      header = detail::split_csv(header_line);
      break;
    }
  }
  if (header.empty()) fail(ErrorCode::EmptyInput, "input stream is empty");

  int year_col = -1, age_col = -1, rate_col = -1, deaths_col = -1, exposure_col = -1;
  RateKind kind = RateKind::Central;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto h = header[c];
    if (h == "year") year_col = c;
    else if (h == "age") age_col = c;
    else if (h == "mx") rate_col = c;
    else if (h == "qx") { rate_col = c; kind = RateKind::Initial; }
    else if (h == "deaths") deaths_col = c;
    else if (h == "exposure") exposure_col = c;
    else {
      fail(ErrorCode::UnknownColumn,
           detail::line_error(line_no, "unknown column '" + std::string(h) + "'"));
    }
  }
  if (year_col < 0 || age_col < 0 || rate_col < 0) {
    fail(ErrorCode::MalformedLine, detail::line_error(line_no, "header must contain year,age and mx or qx"));
  }

  std::vector<TableRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != header.size()) {
      fail(ErrorCode::MalformedLine, detail::line_error(line_no, "expected " + std::to_string(header.size()) +
                                                                     " fields, found " + std::to_string(f.size())));
    }
    if (f[rate_col] == "." || f[rate_col].empty()) continue;
    TableRow r;
    if (!parse_int(f[year_col], r.year)) {
      fail(ErrorCode::MalformedLine, detail::line_error(line_no, "bad year '" + std::string(f[year_col]) + "'"));
    }
    r.age = detail::parse_age_token(f[age_col], line_no);
    if (!parse_double(f[rate_col], r.rate)) {
      fail(ErrorCode::MalformedLine, detail::line_error(line_no, "bad rate '" + std::string(f[rate_col]) + "'"));
    }
    auto optional_field = [&](int col, std::optional<double>& dst) {
      if (col < 0 || f[col].empty() || f[col] == ".") return;
      double v = 0.0;
      if (!parse_double(f[col], v)) {
        fail(ErrorCode::MalformedLine, detail::line_error(line_no, "bad value '" + std::string(f[col]) + "'"));
      }
      dst = v;
    };
    optional_field(deaths_col, r.deaths);
    optional_field(exposure_col, r.exposure);
    rows.push_back(r);
  }
  return RawMortalityTable(kind, std::move(rows));
}

inline RawMortalityTable parse_table(std::istream& in, TableFormat format, Sex sex = Sex::Total) {
  return format == TableFormat::Hmd1x1 ? parse_hmd_1x1(in, sex) : parse_csv_table(in);
}

inline RawMortalityTable parse_table(std::string_view text, TableFormat format, Sex sex = Sex::Total) {
  std::istringstream in{std::string(text)};
  return parse_table(in, format, sex);
}

/// Joins HMD Deaths_1x1 / Exposures_1x1 records onto a rate table. Where both
/// are present the central rate is recomputed as D/E, since the published Mx
/// values are rounded and would violate the table's consistency check.
inline RawMortalityTable attach_deaths_exposure(const RawMortalityTable& table,
                                                const std::vector<HmdRecord>& deaths,
                                                const std::vector<HmdRecord>& exposure, Sex sex) {
  std::map<std::pair<int, int>, double> d, e;
  for (const auto& r : deaths)
    if (auto v = r.column(sex)) d[{r.year, r.age}] = *v;
  for (const auto& r : exposure)
    if (auto v = r.column(sex)) e[{r.year, r.age}] = *v;
  std::vector<TableRow> rows = table.rows();
  for (auto& r : rows) {
    auto di = d.find({r.year, r.age});
    auto ei = e.find({r.year, r.age});
    if (di != d.end()) r.deaths = di->second;
    if (ei != e.end()) r.exposure = ei->second;
    if (r.deaths && r.exposure && *r.exposure > 0.0 && table.kind() == RateKind::Central) {
      r.rate = *r.deaths / *r.exposure;
    }
  }
  return RawMortalityTable(table.kind(), std::move(rows));
}

/// q = 1 - exp(-m).
inline double central_to_initial(double m) {
  if (!std::isfinite(m) || m < 0.0) {
    fail(ErrorCode::InvalidRate, "central rate must be finite and >= 0, got " + format_full(m));
  }
  return -std::expm1(-m);
}

inline double logit(double q) {
  if (!(q > 0.0 && q < 1.0)) {
    fail(ErrorCode::NonFiniteLogit, "logit undefined for q = " + format_full(q));
  }
  return std::log(q / (1.0 - q));
}

inline double inv_logit(double y) {
  return y >= 0.0 ? 1.0 / (1.0 + std::exp(-y)) : std::exp(y) / (1.0 + std::exp(y));
}

/// Logit initial rates on a complete grid. Rows are calendar years, columns ages.
class MortalitySurface {
 public:
  MortalitySurface() = default;

  /// From initial rates q (n years x m ages); every q must lie in (0, 1).
  MortalitySurface(std::vector<int> ages, std::vector<int> years, Eigen::MatrixXd q)
      : ages_(std::move(ages)), years_(std::move(years)), q_(std::move(q)) {
    check_axes();
    y_.resize(q_.rows(), q_.cols());
    for (Eigen::Index i = 0; i < q_.rows(); ++i) {
      for (Eigen::Index j = 0; j < q_.cols(); ++j) {
        if (!(q_(i, j) > 0.0 && q_(i, j) < 1.0)) {
          fail(ErrorCode::NonFiniteLogit, "q = " + format_full(q_(i, j)) + " at year " +
                                              std::to_string(years_[i]) + ", age " +
                                              std::to_string(ages_[j]));
        }
        y_(i, j) = std::log(q_(i, j) / (1.0 - q_(i, j)));
      }
    }
  }

  static MortalitySurface from_logits(std::vector<int> ages, std::vector<int> years,
                                      const Eigen::MatrixXd& y) {
    MortalitySurface s;
    s.ages_ = std::move(ages);
    s.years_ = std::move(years);
    s.y_ = y;
    s.check_axes();
    s.q_ = y.unaryExpr([](double v) { return inv_logit(v); });
    return s;
  }

  const std::vector<int>& ages() const { return ages_; }
  const std::vector<int>& years() const { return years_; }
  const Eigen::MatrixXd& q() const { return q_; }
  const Eigen::MatrixXd& y() const { return y_; }
  int n_years() const { return static_cast<int>(years_.size()); }
  int n_ages() const { return static_cast<int>(ages_.size()); }

  const std::optional<Eigen::MatrixXd>& deaths() const { return deaths_; }
  const std::optional<Eigen::MatrixXd>& exposure() const { return exposure_; }

  MortalitySurface with_counts(Eigen::MatrixXd deaths, Eigen::MatrixXd exposure) const {
    if (deaths.rows() != q_.rows() || deaths.cols() != q_.cols() || exposure.rows() != q_.rows() ||
        exposure.cols() != q_.cols()) {
      fail(ErrorCode::InvalidArgument, "count grids do not match the surface shape");
    }
    MortalitySurface s = *this;
    s.deaths_ = std::move(deaths);
    s.exposure_ = std::move(exposure);
    return s;
  }

  /// Observations stacked age-major: all years for the first age, then the next age.
  Eigen::VectorXd stacked() const {
    Eigen::VectorXd out(y_.size());
    const auto n = y_.rows();
    for (Eigen::Index j = 0; j < y_.cols(); ++j) out.segment(j * n, n) = y_.col(j);
    return out;
  }

  int year_index(int year) const {
    if (years_.empty() || year < years_.front() || year > years_.back()) {
      fail(ErrorCode::OutOfRange, "year " + std::to_string(year) + " outside surface");
    }
    return year - years_.front();
  }

  /// Contiguous block of years [first, last].
  MortalitySurface slice_years(int first, int last) const {
    const int a = year_index(first), b = year_index(last);
    if (a > b) fail(ErrorCode::OutOfRange, "empty year slice");
    MortalitySurface s;
    s.ages_ = ages_;
    s.years_.assign(years_.begin() + a, years_.begin() + b + 1);
    s.q_ = q_.middleRows(a, b - a + 1);
    s.y_ = y_.middleRows(a, b - a + 1);
    if (deaths_) s.deaths_ = deaths_->middleRows(a, b - a + 1);
    if (exposure_) s.exposure_ = exposure_->middleRows(a, b - a + 1);
    return s;
  }

 private:
  void check_axes() const {
    if (ages_.empty() || years_.empty()) fail(ErrorCode::InvalidArgument, "surface axes must be non-empty");
    for (std::size_t k = 1; k < ages_.size(); ++k)
      if (ages_[k] != ages_[k - 1] + 1) fail(ErrorCode::InvalidArgument, "ages must be consecutive");
    for (std::size_t k = 1; k < years_.size(); ++k)
      if (years_[k] != years_[k - 1] + 1) fail(ErrorCode::InvalidArgument, "years must be consecutive");
    const auto n = static_cast<Eigen::Index>(years_.size());
    const auto m = static_cast<Eigen::Index>(ages_.size());
    if ((q_.size() && (q_.rows() != n || q_.cols() != m)) || (y_.size() && (y_.rows() != n || y_.cols() != m))) {
      fail(ErrorCode::InvalidArgument, "grid shape does not match axes");
    }
  }

  std::vector<int> ages_;
  std::vector<int> years_;
  Eigen::MatrixXd q_;
  Eigen::MatrixXd y_;
  std::optional<Eigen::MatrixXd> deaths_;
  std::optional<Eigen::MatrixXd> exposure_;
};

struct SurfaceOptions {
  /// When set, q = 0 cells are replaced by this value instead of raising NonFiniteLogit.
  std::optional<double> clamp_q;
};

inline std::vector<int> range_values(IntRange r) {
  std::vector<int> v;
  for (int k = r.lo; k <= r.hi; ++k) v.push_back(k);
  return v;
}

inline MortalitySurface build_surface(const RawMortalityTable& table, IntRange ages, IntRange years,
                                      const SurfaceOptions& opts = {}) {
  const int n = years.size(), m = ages.size();
  Eigen::MatrixXd q(n, m), deaths(n, m), exposure(n, m);
  bool have_counts = true;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const int t = years.lo + i, x = ages.lo + j;
      const TableRow* row = table.find(t, x);
      if (!row) {
        fail(ErrorCode::MissingCell, "no value for year " + std::to_string(t) + ", age " + std::to_string(x));
      }
      double qv = table.kind() == RateKind::Central ? central_to_initial(row->rate) : row->rate;
      if (qv == 0.0 && opts.clamp_q) qv = *opts.clamp_q;
      if (!(qv > 0.0 && qv < 1.0)) {
        fail(ErrorCode::NonFiniteLogit, "q = " + format_full(qv) + " at year " + std::to_string(t) +
                                            ", age " + std::to_string(x));
      }
      q(i, j) = qv;
      if (row->deaths && row->exposure) {
        deaths(i, j) = *row->deaths;
        exposure(i, j) = *row->exposure;
      } else {
        have_counts = false;
      }
    }
  }
  MortalitySurface s(range_values(ages), range_values(years), std::move(q));
  if (have_counts) s = s.with_counts(std::move(deaths), std::move(exposure));
  return s;
}

inline std::pair<MortalitySurface, MortalitySurface> split_train_test(const MortalitySurface& s,
                                                                      int last_train_year) {
  const auto& ys = s.years();
  if (last_train_year < ys.front() || last_train_year >= ys.back()) {
    fail(ErrorCode::OutOfRange, "last training year " + std::to_string(last_train_year) + " must satisfy " +
                                    std::to_string(ys.front()) + " <= t < " + std::to_string(ys.back()));
  }
  return {s.slice_years(ys.front(), last_train_year), s.slice_years(last_train_year + 1, ys.back())};
}

inline void write_surface_csv(const MortalitySurface& s, std::ostream& out) {
  out << "year,age,q,logit_q\n";
  for (int i = 0; i < s.n_years(); ++i)
    for (int j = 0; j < s.n_ages(); ++j)
      out << s.years()[i] << ',' << s.ages()[j] << ',' << format_full(s.q()(i, j)) << ','
          << format_full(s.y()(i, j)) << '\n';
}

}  // namespace mortcast

#endif  // MORTCAST_MORTALITY_DATA_HPP
