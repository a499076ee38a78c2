#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmob/errors.hpp"

namespace predmob {

enum class OutcomeKind { kContinuous, kBinary };

inline std::string to_string(OutcomeKind kind) {
  return kind == OutcomeKind::kBinary ? "binary" : "continuous";
}

inline OutcomeKind outcome_kind_from_string(std::string_view s) {
  if (s == "continuous") return OutcomeKind::kContinuous;
  if (s == "binary") return OutcomeKind::kBinary;
  throw DataError("unknown outcome kind '" + std::string(s) + "'");
}

/// Non-negative case weights aligned with the rows of a Dataset.
struct CaseWeights {
  std::vector<double> w;
  bool rescaled = false;

  static CaseWeights ones(std::size_t n) { return {std::vector<double>(n, 1.0), true}; }

  std::size_t size() const { return w.size(); }
  double operator[](std::size_t i) const { return w[i]; }
  double total() const {
    double s = 0.0;
    for (double v : w) s += v;
    return s;
  }

  void validate() const {
    double s = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("case weights must be finite and >= 0");
      s += v;
    }
    if (!(s > 0.0)) throw DataError("case weights sum to zero");
  }

  // Scale so that the weights sum to `target`.
  void rescale_to(double target) {
    const double s = total();
    if (!(s > 0.0)) throw DataError("cannot rescale weights summing to zero");
    for (double& v : w) v *= target / s;
    rescaled = true;
  }
};

/// Treatment recoded to -1 (control) / +1 (active).
struct EffectCodedTreatment {
  std::vector<double> t_star;
};

inline EffectCodedTreatment effect_code(std::span<const int> treatment) {
  EffectCodedTreatment out;
  out.t_star.reserve(treatment.size());
  for (int t : treatment) {
    if (t != 0 && t != 1) throw DataError("treatment must be 0/1");
    out.t_star.push_back(2.0 * t - 1.0);
  }
  return out;
}

inline std::vector<int> effect_decode(std::span<const double> t_star) {
  std::vector<int> out;
  out.reserve(t_star.size());
  for (double v : t_star) out.push_back(static_cast<int>((v + 1.0) / 2.0));
  return out;
}

/// Immutable table: outcome, binary treatment and candidate biomarkers.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<double> outcome, std::vector<int> treatment, Eigen::MatrixXd biomarkers,
          std::vector<std::string> names, OutcomeKind kind = OutcomeKind::kContinuous,
          std::optional<std::vector<double>> case_weights = std::nullopt)
      : outcome_(std::move(outcome)),
        treatment_(std::move(treatment)),
        markers_(std::move(biomarkers)),
        names_(std::move(names)),
        kind_(kind),
        case_weights_(std::move(case_weights)) {
    validate();
    const auto coded = effect_code(treatment_);
    t_star_ = coded.t_star;
    binary_.resize(p());
    for (std::size_t j = 0; j < p(); ++j) {
      bool bin = true;
      for (std::size_t i = 0; i < n() && bin; ++i) {
        const double v = markers_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        bin = (v == 0.0 || v == 1.0);
      }
      binary_[j] = bin;
    }
  }

  std::size_t n() const { return outcome_.size(); }
  std::size_t p() const { return static_cast<std::size_t>(markers_.cols()); }

  std::span<const double> outcome() const { return outcome_; }
  std::span<const int> treatment() const { return treatment_; }
  std::span<const double> t_star() const { return t_star_; }
  const Eigen::MatrixXd& biomarkers() const { return markers_; }
  double marker(std::size_t i, std::size_t j) const {
    return markers_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  std::span<const double> column(std::size_t j) const {
    return {markers_.col(static_cast<Eigen::Index>(j)).data(), n()};
  }
  const std::vector<std::string>& names() const { return names_; }
  OutcomeKind outcome_kind() const { return kind_; }
  bool is_binary(std::size_t j) const { return binary_[j]; }
  const std::optional<std::vector<double>>& case_weights() const { return case_weights_; }

  std::size_t n_treated() const {
    std::size_t c = 0;
    for (int t : treatment_) c += static_cast<std::size_t>(t);
    return c;
  }
  std::size_t n_control() const { return n() - n_treated(); }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t j = 0; j < names_.size(); ++j)
      if (names_[j] == name) return j;
    throw UsageError("unknown biomarker '" + std::string(name) + "'");
  }

  std::vector<double> row(std::size_t i) const {
    std::vector<double> x(p());
    for (std::size_t j = 0; j < p(); ++j) x[j] = marker(i, j);
    return x;
  }

 private:
  void validate() const {
    const auto n = outcome_.size();
    if (treatment_.size() != n || static_cast<std::size_t>(markers_.rows()) != n)
      throw DataError("outcome, treatment and biomarkers must have the same number of rows");
    if (names_.size() != static_cast<std::size_t>(markers_.cols()))
      throw DataError("one name per biomarker column required");
    if (markers_.cols() < 1) throw DataError("at least one biomarker column required");
    std::size_t treated = 0;
    for (int t : treatment_) {
      if (t != 0 && t != 1) throw DataError("treatment must be 0/1");
      treated += static_cast<std::size_t>(t);
    }
    if (treated == 0 || treated == n) throw DataError("both treatment arms must be non-empty");
    for (double y : outcome_) {
      if (!std::isfinite(y)) throw DataError("outcome values must be finite");
      if (kind_ == OutcomeKind::kBinary && y != 0.0 && y != 1.0)
        throw DataError("binary outcome must be 0/1");
    }
    if (!markers_.allFinite()) throw DataError("biomarker values must be finite");
    if (case_weights_) {
      if (case_weights_->size() != n) throw DataError("case weight column has wrong length");
      CaseWeights{*case_weights_, false}.validate();
    }
  }

  std::vector<double> outcome_;
  std::vector<int> treatment_;
  std::vector<double> t_star_;
  Eigen::MatrixXd markers_;
  std::vector<std::string> names_;
  std::vector<bool> binary_;
  OutcomeKind kind_ = OutcomeKind::kContinuous;
  std::optional<std::vector<double>> case_weights_;
};

// ---------------------------------------------------------------------------
// CSV

/// Column-role map for CSV ingestion.
struct CsvSchema {
  std::string outcome = "y";
  std::string treatment = "treatment";
  std::vector<std::string> biomarkers;  // empty: every remaining numeric column
  std::optional<std::string> weights;
  std::vector<std::string> ignore = {"true_ite"};
  OutcomeKind outcome_kind = OutcomeKind::kContinuous;
};

namespace csv {

inline std::string unquote(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

inline std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  bool quoted = false;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i < line.size() && line[i] == '"') quoted = !quoted;
    if (i == line.size() || (line[i] == ',' && !quoted)) {
      cells.push_back(unquote(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return cells;
}

inline bool parse_double(std::string_view cell, double& out) {
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return res.ec == std::errc() && res.ptr == cell.data() + cell.size() && std::isfinite(out);
}

// Shortest representation that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based file line of each row

  std::size_t column_index(std::string_view name, const std::string& source) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw DataError(source + ": missing column '" + std::string(name) + "'");
  }
};

inline Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file (header row required)");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  t.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw DataError(path.string() + ": line " + std::to_string(lineno) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
    t.lines.push_back(lineno);
  }
  return t;
}

}  // namespace csv

/// Reads a comma-separated file with a header row. Rows with missing cells
/// are rejected with an error, never imputed.
inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  const auto table = csv::read_table(path);
  const std::string src = path.string();
  const auto y_col = table.column_index(schema.outcome, src);
  const auto t_col = table.column_index(schema.treatment, src);
  std::optional<std::size_t> w_col;
  if (schema.weights) w_col = table.column_index(*schema.weights, src);

  std::vector<std::string> marker_names = schema.biomarkers;
  if (marker_names.empty()) {
    for (const auto& h : table.header) {
      if (h == schema.outcome || h == schema.treatment || (schema.weights && h == *schema.weights))
        continue;
      if (std::find(schema.ignore.begin(), schema.ignore.end(), h) != schema.ignore.end()) continue;
      marker_names.push_back(h);
    }
  }
  if (marker_names.empty()) throw DataError(src + ": schema names no biomarker columns");
  std::vector<std::size_t> x_cols;
  for (const auto& name : marker_names) x_cols.push_back(table.column_index(name, src));

  const std::size_t n = table.rows.size();
  std::vector<double> y(n);
  std::vector<int> t(n);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(x_cols.size()));
  std::optional<std::vector<double>> w;
  if (w_col) w.emplace(n);

  auto where = [&](std::size_t i) { return src + ": line " + std::to_string(table.lines[i]); };
  auto cell_value = [&](std::size_t i, std::size_t col) {
    const auto& cell = table.rows[i][col];
    if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan")
      throw DataError(where(i) + " has a missing value in column '" +
                      table.header[col] + "'");
    double v = 0.0;
    if (!csv::parse_double(cell, v))
      throw DataError(where(i) + ", column '" + table.header[col] +
                      "': non-numeric cell '" + cell + "'");
    return v;
  };

  for (std::size_t i = 0; i < n; ++i) {
    y[i] = cell_value(i, y_col);
    const double tv = cell_value(i, t_col);
    if (tv != 0.0 && tv != 1.0)
      throw DataError(where(i) + ": treatment must be 0/1");
    t[i] = static_cast<int>(tv);
    for (std::size_t j = 0; j < x_cols.size(); ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cell_value(i, x_cols[j]);
    if (w) (*w)[i] = cell_value(i, *w_col);
  }
  if (n == 0) throw DataError(src + ": no data rows");
  return Dataset(std::move(y), std::move(t), std::move(x), std::move(marker_names),
                 schema.outcome_kind, std::move(w));
}

/// Writes the dataset with columns y, treatment, markers..., then any extra columns.
inline void save_csv(const Dataset& d, const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::vector<double>>>& extra = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "y,treatment";
  for (const auto& name : d.names()) out << ',' << name;
  if (d.case_weights()) out << ",weight";
  for (const auto& [name, values] : extra) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < d.n(); ++i) {
    out << csv::format_double(d.outcome()[i]) << ',' << d.treatment()[i];
    for (std::size_t j = 0; j < d.p(); ++j) out << ',' << csv::format_double(d.marker(i, j));
    if (d.case_weights()) out << ',' << csv::format_double((*d.case_weights())[i]);
    for (const auto& [name, values] : extra) out << ',' << csv::format_double(values[i]);
    out << '\n';
  }
}

/// Sidecar describing column roles, written next to a dataset CSV.
inline nlohmann::json dataset_sidecar(const Dataset& d) {
  nlohmann::json j;
  j["names"] = d.names();
  j["roles"] = {{"outcome", "y"}, {"treatment", "treatment"}, {"biomarkers", d.names()}};
  if (d.case_weights()) j["roles"]["weights"] = "weight";
  j["outcome_kind"] = to_string(d.outcome_kind());
  j["n"] = d.n();
  return j;
}

inline CsvSchema schema_from_sidecar(const nlohmann::json& j) {
  CsvSchema s;
  const auto& roles = j.at("roles");
  s.outcome = roles.at("outcome").get<std::string>();
  s.treatment = roles.at("treatment").get<std::string>();
  s.biomarkers = roles.at("biomarkers").get<std::vector<std::string>>();
  if (roles.contains("weights")) s.weights = roles.at("weights").get<std::string>();
  if (j.contains("outcome_kind"))
    s.outcome_kind = outcome_kind_from_string(j.at("outcome_kind").get<std::string>());
  return s;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p += ".json";
  return p;
}

}  // namespace predmob
