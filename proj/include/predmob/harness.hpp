#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "predmob/adjustment.hpp"
#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/forest.hpp"
#include "predmob/numeric.hpp"
#include "predmob/random.hpp"
#include "predmob/scenarios.hpp"

namespace predmob {

struct ExperimentConfig {
  std::vector<std::string> scenarios;
  std::size_t n = 0;  // 0: scenario default
  std::size_t runs = 100;
  std::vector<Strategy> adjustments{std::begin(kAllStrategies), std::end(kAllStrategies)};
  ForestConfig forest;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "results";
  unsigned threads = 1;
  double max_failure_fraction = 0.10;

  void validate() const {
    if (runs < 1) throw UsageError("runs must be >= 1");
    if (scenarios.empty()) throw UsageError("no scenario given");
    if (adjustments.empty()) throw UsageError("no adjustment strategy given");
    for (const auto& s : scenarios) scenario(s);
  }
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("scenario")) {
    if (j.at("scenario").is_array()) c.scenarios = j.at("scenario").get<std::vector<std::string>>();
    else c.scenarios = {j.at("scenario").get<std::string>()};
  }
  if (j.contains("scenarios")) c.scenarios = j.at("scenarios").get<std::vector<std::string>>();
  c.n = j.value("n", c.n);
  c.runs = j.value("runs", c.runs);
  if (j.contains("adjustments")) {
    c.adjustments.clear();
    for (const auto& a : j.at("adjustments")) c.adjustments.push_back(strategy_from_string(a.get<std::string>()));
  }
  if (j.contains("forest")) c.forest = forest_config_from_json(j.at("forest"));
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir.string());
  c.threads = j.value("threads", c.threads);
  c.max_failure_fraction = j.value("max_failure_fraction", c.max_failure_fraction);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

struct IdentificationRow {
  std::string scenario;
  std::size_t run;
  Strategy adjustment;
  std::string variable;
  double permutation_importance;
  double mean_minimal_depth;
};

struct AccuracyRow {
  std::string scenario;
  std::size_t run;
  Strategy adjustment;
  double bias;
  double variance;
  double mse;
  std::vector<std::pair<std::string, double>> predictive_effect;
};

struct FailureRow {
  std::string scenario;
  std::size_t run;
  Strategy adjustment;
  std::string reason;
};

struct IdentificationResults {
  std::vector<IdentificationRow> rows;
  std::vector<FailureRow> failures;
};

struct AccuracyResults {
  std::vector<AccuracyRow> rows;
  std::vector<FailureRow> failures;
};

/// Per-run seeds. Every strategy in a run sees the same data and tree seed.
struct RunSeeds {
  std::uint64_t data, forest, permutation;
};

inline RunSeeds run_seeds(std::uint64_t master, std::size_t run) {
  return {derive_seed(master, Stream::kRun, run), derive_seed(master, Stream::kTree, run),
          derive_seed(master, Stream::kPermutation, run)};
}

struct AccuracyMetrics {
  double bias, variance, mse;
};

inline AccuracyMetrics accuracy_metrics(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size() || predicted.empty())
    throw UsageError("accuracy_metrics: length mismatch");
  double bias = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double e = predicted[i] - truth[i];
    bias += e;
    mse += e * e;
  }
  bias /= static_cast<double>(predicted.size());
  mse /= static_cast<double>(predicted.size());
  return {bias, mse - bias * bias, mse};
}

namespace detail {

inline void check_failures(std::size_t failures, std::size_t units, double max_fraction) {
  if (static_cast<double>(failures) > max_fraction * static_cast<double>(units))
    throw ExperimentFailure(std::to_string(failures) + " of " + std::to_string(units) +
                            " run/adjustment units failed, above the abort threshold");
}

template <typename Row, typename Body>
void run_pool(const ExperimentConfig& cfg, const std::string& sid, std::vector<Row>& rows,
              std::vector<FailureRow>& failures, Body&& body) {
  struct Slot {
    std::vector<Row> rows;
    std::vector<FailureRow> failures;
  };
  std::vector<Slot> slots(cfg.runs);
  parallel_for(cfg.runs, cfg.threads, [&](std::size_t run) {
    const auto seeds = run_seeds(cfg.seed, run);
    std::optional<GeneratedSample> sample;
    const auto spec = scenario(sid);
    try {
      sample.emplace(generate(spec, cfg.n ? cfg.n : spec.n, seeds.data));
    } catch (const Error& e) {
      for (auto a : cfg.adjustments) slots[run].failures.push_back({sid, run, a, e.what()});
      return;
    }
    for (auto a : cfg.adjustments) {
      try {
        body(*sample, a, seeds, run, slots[run].rows);
      } catch (const ExperimentFailure&) {
        throw;
      } catch (const Error& e) {
        slots[run].failures.push_back({sid, run, a, e.what()});
      }
    }
  });
  for (auto& s : slots) {
    rows.insert(rows.end(), s.rows.begin(), s.rows.end());
    failures.insert(failures.end(), s.failures.begin(), s.failures.end());
  }
}

inline ForestConfig forest_for_run(const ExperimentConfig& cfg, const RunSeeds& seeds) {
  auto fc = cfg.forest;
  fc.seed = seeds.forest;
  fc.threads = 1;
  return fc;
}

}  // namespace detail

/// Identification experiment over every configured scenario, returning rows
/// in (scenario, run, adjustment, variable) order. Throws ExperimentFailure
/// when failed units exceed the configured fraction.
inline IdentificationResults identification_rows(const ExperimentConfig& cfg) {
  cfg.validate();
  IdentificationResults res;
  for (const auto& sid : cfg.scenarios) {
    std::vector<FailureRow> failures;
    detail::run_pool(cfg, sid, res.rows, failures,
                     [&](const GeneratedSample& s, Strategy a, const RunSeeds& seeds, std::size_t run,
                         std::vector<IdentificationRow>& out) {
                       const auto plan = build_plan(s.dataset, a);
                       const auto forest = fit_forest(s.dataset, plan, detail::forest_for_run(cfg, seeds));
                       const auto pi = permutation_importance(forest, s.dataset, seeds.permutation);
                       const auto md = mean_minimal_depth(forest);
                       for (std::size_t j = 0; j < pi.size(); ++j)
                         out.push_back({sid, run, a, s.dataset.names()[j], pi[j], md[j]});
                     });
    detail::check_failures(failures.size(), cfg.runs * cfg.adjustments.size(), cfg.max_failure_fraction);
    res.failures.insert(res.failures.end(), failures.begin(), failures.end());
  }
  return res;
}

inline AccuracyResults accuracy_rows(const ExperimentConfig& cfg) {
  cfg.validate();
  for (const auto& sid : cfg.scenarios)
    if (scenario(sid).family != ScenarioFamily::kAccuracy)
      throw UsageError("scenario '" + sid + "' is not an accuracy scenario (use 1-8)");
  AccuracyResults res;
  for (const auto& sid : cfg.scenarios) {
    std::vector<FailureRow> failures;
    detail::run_pool(cfg, sid, res.rows, failures,
                     [&](const GeneratedSample& s, Strategy a, const RunSeeds& seeds, std::size_t run,
                         std::vector<AccuracyRow>& out) {
                       const auto plan = build_plan(s.dataset, a);
                       const auto forest = fit_forest(s.dataset, plan, detail::forest_for_run(cfg, seeds));
                       const auto ite = predict_ite(forest, s.dataset);
                       const auto m = accuracy_metrics(ite, s.true_ite);
                       AccuracyRow row{sid, run, a, m.bias, m.variance, m.mse, {}};
                       for (std::size_t j = 0; j < s.dataset.p(); ++j)
                         row.predictive_effect.emplace_back(s.dataset.names()[j],
                                                            predictive_effect(forest, s.dataset, j, ite));
                       out.push_back(std::move(row));
                     });
    detail::check_failures(failures.size(), cfg.runs * cfg.adjustments.size(), cfg.max_failure_fraction);
    res.failures.insert(res.failures.end(), failures.begin(), failures.end());
  }
  return res;
}

// ---------------------------------------------------------------------------
// CSV files

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

inline std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline void write_failures(const std::vector<FailureRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "scenario,run,adjustment,reason\n";
  for (const auto& r : rows)
    out << csv_cell(r.scenario) << ',' << r.run << ',' << to_string(r.adjustment) << ',' << csv_cell(r.reason) << '\n';
}

inline std::string scenario_file(const std::string& prefix, const std::string& sid) {
  return prefix + "_" + sid + ".csv";
}

}  // namespace detail

inline void write_identification(const IdentificationResults& res, const std::filesystem::path& dir) {
  std::map<std::string, std::vector<const IdentificationRow*>> by_scenario;
  for (const auto& r : res.rows) by_scenario[r.scenario].push_back(&r);
  for (const auto& [sid, rows] : by_scenario) {
    auto out = detail::open_out(dir / detail::scenario_file("identify", sid));
    out << "scenario,run,adjustment,variable,permutation_importance,mean_minimal_depth\n";
    for (const auto* r : rows)
      out << r->scenario << ',' << r->run << ',' << to_string(r->adjustment) << ',' << r->variable << ','
          << csv::format_double(r->permutation_importance) << ',' << csv::format_double(r->mean_minimal_depth)
          << '\n';
  }
  detail::write_failures(res.failures, dir / "failures_identify.csv");
}

inline void write_accuracy(const AccuracyResults& res, const std::filesystem::path& dir) {
  std::map<std::string, std::vector<const AccuracyRow*>> by_scenario;
  for (const auto& r : res.rows) by_scenario[r.scenario].push_back(&r);
  for (const auto& [sid, rows] : by_scenario) {
    auto out = detail::open_out(dir / detail::scenario_file("accuracy", sid));
    out << "scenario,run,adjustment,bias,variance,mse";
    for (const auto& [name, _] : rows.front()->predictive_effect) out << ",predictive_effect_" << name;
    out << '\n';
    for (const auto* r : rows) {
      out << r->scenario << ',' << r->run << ',' << to_string(r->adjustment) << ',' << csv::format_double(r->bias)
          << ',' << csv::format_double(r->variance) << ',' << csv::format_double(r->mse);
      for (const auto& [_, v] : r->predictive_effect) out << ',' << csv::format_double(v);
      out << '\n';
    }
  }
  detail::write_failures(res.failures, dir / "failures_accuracy.csv");
}

inline IdentificationResults run_identification(const ExperimentConfig& cfg) {
  auto res = identification_rows(cfg);
  write_identification(res, cfg.output_dir);
  return res;
}

inline AccuracyResults run_accuracy(const ExperimentConfig& cfg) {
  auto res = accuracy_rows(cfg);
  write_accuracy(res, cfg.output_dir);
  return res;
}

// ---------------------------------------------------------------------------
// Summaries and verdicts

struct Quartiles {
  double q1, median, q3;
};

inline Quartiles quartiles(const std::vector<double>& v) {
  return {quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75)};
}

struct VariableSummary {
  std::string variable;
  Quartiles importance;
  Quartiles depth;
};

/// Importance summary of one scenario/adjustment, variables in column order.
struct IdentificationSummary {
  std::string scenario;
  Strategy adjustment;
  std::size_t runs = 0;
  std::vector<VariableSummary> variables;

  /// Variables whose lower importance quartile is above zero.
  std::vector<std::string> clearly_positive() const {
    std::vector<std::string> out;
    for (const auto& v : variables)
      if (v.importance.q1 > 0.0) out.push_back(v.variable);
    return out;
  }

  /// The variable with the strictly largest median importance, provided its
  /// lower quartile is positive and every other median is at most half of it.
  std::optional<std::string> identified() const {
    if (variables.empty()) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t j = 1; j < variables.size(); ++j)
      if (variables[j].importance.median > variables[best].importance.median) best = j;
    const double top = variables[best].importance.median;
    if (!(variables[best].importance.q1 > 0.0) || !(top > 0.0)) return std::nullopt;
    for (std::size_t j = 0; j < variables.size(); ++j)
      if (j != best && variables[j].importance.median > 0.5 * top) return std::nullopt;
    return variables[best].variable;
  }

  /// The variable with the strictly smallest median mean-minimal-depth.
  std::optional<std::string> shallowest() const {
    std::optional<std::size_t> best;
    bool tie = false;
    for (std::size_t j = 0; j < variables.size(); ++j) {
      if (!best || variables[j].depth.median < variables[*best].depth.median) {
        best = j;
        tie = false;
      } else if (variables[j].depth.median == variables[*best].depth.median) {
        tie = true;
      }
    }
    if (!best || tie) return std::nullopt;
    return variables[*best].variable;
  }

  const VariableSummary& at(const std::string& name) const {
    for (const auto& v : variables)
      if (v.variable == name) return v;
    throw UsageError("no variable '" + name + "' in summary");
  }
};

inline std::vector<IdentificationSummary> summarize(const std::vector<IdentificationRow>& rows) {
  struct Acc {
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> values;
    std::vector<std::size_t> runs;
  };
  std::map<std::pair<std::string, std::string>, Acc> groups;
  for (const auto& r : rows) {
    auto& g = groups[{r.scenario, to_string(r.adjustment)}];
    auto [it, inserted] = g.values.try_emplace(r.variable);
    if (inserted) g.order.push_back(r.variable);
    it->second.first.push_back(r.permutation_importance);
    it->second.second.push_back(r.mean_minimal_depth);
    if (g.runs.empty() || g.runs.back() != r.run) g.runs.push_back(r.run);
  }
  std::vector<IdentificationSummary> out;
  for (const auto& [key, g] : groups) {
    IdentificationSummary s;
    s.scenario = key.first;
    s.adjustment = strategy_from_string(key.second);
    s.runs = g.runs.size();
    for (const auto& name : g.order) {
      const auto& [pi, md] = g.values.at(name);
      s.variables.push_back({name, quartiles(pi), quartiles(md)});
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline const IdentificationSummary& find_summary(const std::vector<IdentificationSummary>& all,
                                                 const std::string& sid, Strategy a) {
  for (const auto& s : all)
    if (s.scenario == sid && s.adjustment == a) return s;
  throw UsageError("no identification results for scenario " + sid + " / " + to_string(a));
}

struct AccuracySummary {
  std::string scenario;
  Strategy adjustment;
  std::size_t runs = 0;
  double bias = 0, variance = 0, mse = 0;
  std::vector<std::pair<std::string, double>> predictive_effect;  // mean over runs

  double effect(const std::string& name) const {
    for (const auto& [k, v] : predictive_effect)
      if (k == name) return v;
    throw UsageError("no predictive effect for '" + name + "'");
  }
};

inline std::vector<AccuracySummary> summarize(const std::vector<AccuracyRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<const AccuracyRow*>> groups;
  for (const auto& r : rows) groups[{r.scenario, to_string(r.adjustment)}].push_back(&r);
  std::vector<AccuracySummary> out;
  for (const auto& [key, g] : groups) {
    AccuracySummary s;
    s.scenario = key.first;
    s.adjustment = strategy_from_string(key.second);
    s.runs = g.size();
    s.predictive_effect = g.front()->predictive_effect;
    for (auto& [_, v] : s.predictive_effect) v = 0.0;
    for (const auto* r : g) {
      s.bias += r->bias;
      s.variance += r->variance;
      s.mse += r->mse;
      for (std::size_t k = 0; k < s.predictive_effect.size(); ++k)
        s.predictive_effect[k].second += r->predictive_effect[k].second;
    }
    const double k = static_cast<double>(g.size());
    s.bias /= k;
    s.variance /= k;
    s.mse /= k;
    for (auto& [_, v] : s.predictive_effect) v /= k;
    out.push_back(std::move(s));
  }
  return out;
}

inline const AccuracySummary& find_summary(const std::vector<AccuracySummary>& all, const std::string& sid,
                                           Strategy a) {
  for (const auto& s : all)
    if (s.scenario == sid && s.adjustment == a) return s;
  throw UsageError("no accuracy results for scenario " + sid + " / " + to_string(a));
}

// ---------------------------------------------------------------------------
// Reading results back

namespace detail {

inline double cell_double(const std::string& cell, const std::string& src) {
  double v;
  if (!csv::parse_double(cell, v)) throw DataError(src + ": non-numeric value '" + cell + "'");
  return v;
}

inline std::size_t cell_index(const std::string& cell, const std::string& src) {
  const double v = cell_double(cell, src);
  if (v < 0 || v != std::floor(v)) throw DataError(src + ": bad run index '" + cell + "'");
  return static_cast<std::size_t>(v);
}

inline std::vector<std::filesystem::path> result_files(const std::filesystem::path& dir,
                                                       const std::string& prefix) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with(prefix + "_") && name.ends_with(".csv")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline std::vector<IdentificationRow> read_identification(const std::filesystem::path& file) {
  const auto src = file.string();
  const auto t = csv::read_table(file);
  const auto cs = t.column_index("scenario", src), cr = t.column_index("run", src),
             ca = t.column_index("adjustment", src), cv = t.column_index("variable", src),
             cp = t.column_index("permutation_importance", src), cm = t.column_index("mean_minimal_depth", src);
  std::vector<IdentificationRow> rows;
  for (const auto& r : t.rows) {
    try {
      rows.push_back({r[cs], detail::cell_index(r[cr], src), strategy_from_string(r[ca]), r[cv],
                      detail::cell_double(r[cp], src), detail::cell_double(r[cm], src)});
    } catch (const UsageError& e) {
      throw DataError(src + ": " + e.what());
    }
  }
  return rows;
}

inline std::vector<AccuracyRow> read_accuracy(const std::filesystem::path& file) {
  const auto src = file.string();
  const auto t = csv::read_table(file);
  const auto cs = t.column_index("scenario", src), cr = t.column_index("run", src),
             ca = t.column_index("adjustment", src), cb = t.column_index("bias", src),
             cv = t.column_index("variance", src), cm = t.column_index("mse", src);
  const std::string pe = "predictive_effect_";
  std::vector<std::pair<std::string, std::size_t>> pe_cols;
  for (std::size_t j = 0; j < t.header.size(); ++j)
    if (t.header[j].starts_with(pe)) pe_cols.emplace_back(t.header[j].substr(pe.size()), j);
  std::vector<AccuracyRow> rows;
  for (const auto& r : t.rows) {
    try {
      AccuracyRow row{r[cs],
                      detail::cell_index(r[cr], src),
                      strategy_from_string(r[ca]),
                      detail::cell_double(r[cb], src),
                      detail::cell_double(r[cv], src),
                      detail::cell_double(r[cm], src),
                      {}};
      for (const auto& [name, j] : pe_cols) row.predictive_effect.emplace_back(name, detail::cell_double(r[j], src));
      rows.push_back(std::move(row));
    } catch (const UsageError& e) {
      throw DataError(src + ": " + e.what());
    }
  }
  return rows;
}

inline nlohmann::json to_json(const Quartiles& q) { return {{"q1", q.q1}, {"median", q.median}, {"q3", q.q3}}; }

inline nlohmann::json to_json(const IdentificationSummary& s) {
  nlohmann::json vars = nlohmann::json::object();
  for (const auto& v : s.variables)
    vars[v.variable] = {{"permutation_importance", to_json(v.importance)},
                        {"mean_minimal_depth", to_json(v.depth)}};
  const auto verdict = s.identified();
  const auto shallow = s.shallowest();
  return {{"runs", s.runs},
          {"variables", vars},
          {"clearly_positive", s.clearly_positive()},
          {"verdict", verdict ? nlohmann::json(*verdict) : nlohmann::json(nullptr)},
          {"smallest_median_depth", shallow ? nlohmann::json(*shallow) : nlohmann::json(nullptr)}};
}

inline nlohmann::json to_json(const AccuracySummary& s) {
  nlohmann::json pe = nlohmann::json::object();
  for (const auto& [k, v] : s.predictive_effect) pe[k] = v;
  return {{"runs", s.runs}, {"bias", s.bias}, {"variance", s.variance}, {"mse", s.mse}, {"predictive_effect", pe}};
}

/// Reads identify_*.csv, accuracy_*.csv and failures_*.csv from dir and
/// writes summary.json next to them. Keys are sorted.
inline nlohmann::json report(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  const auto ident_files = detail::result_files(dir, "identify");
  const auto acc_files = detail::result_files(dir, "accuracy");
  if (ident_files.empty() && acc_files.empty())
    throw DataError("'" + dir.string() + "' contains no identify_*.csv or accuracy_*.csv results");
  nlohmann::json j = nlohmann::json::object();
  std::vector<IdentificationRow> irows;
  for (const auto& f : ident_files) {
    auto r = read_identification(f);
    irows.insert(irows.end(), r.begin(), r.end());
  }
  std::vector<AccuracyRow> arows;
  for (const auto& f : acc_files) {
    auto r = read_accuracy(f);
    arows.insert(arows.end(), r.begin(), r.end());
  }
  j["identification"] = nlohmann::json::object();
  for (const auto& s : summarize(irows)) j["identification"][s.scenario][to_string(s.adjustment)] = to_json(s);
  j["accuracy"] = nlohmann::json::object();
  for (const auto& s : summarize(arows)) j["accuracy"][s.scenario][to_string(s.adjustment)] = to_json(s);
  std::size_t failures = 0;
  for (const auto& f : detail::result_files(dir, "failures")) failures += csv::read_table(f).rows.size();
  j["failures"] = failures;
  std::ofstream out(dir / "summary.json");
  if (!out) throw DataError("cannot write summary.json in '" + dir.string() + "'");
  out << j.dump(2) << '\n';
  return j;
}

}  // namespace predmob
