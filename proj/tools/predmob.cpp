// predmob command-line front end.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "predmob/adjustment.hpp"
#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/forest.hpp"
#include "predmob/harness.hpp"
#include "predmob/scenarios.hpp"

namespace fs = std::filesystem;
using namespace predmob;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitExperiment = 3;

Dataset load_dataset(const fs::path& path, const std::optional<std::string>& weights_col) {
  CsvSchema schema;
  const auto side = sidecar_path(path);
  if (fs::exists(side)) {
    std::ifstream in(side);
    try {
      schema = schema_from_sidecar(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
  }
  if (weights_col) schema.weights = *weights_col;
  return load_csv(path, schema);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::ofstream open_csv(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

void warn(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

std::size_t variable_index(const Dataset& d, const std::string& name) {
  const auto& names = d.names();
  for (std::size_t j = 0; j < names.size(); ++j)
    if (names[j] == name) return j;
  throw UsageError("unknown variable '" + name + "'");
}

std::vector<double> default_grid(const Dataset& d, std::size_t j, std::size_t points) {
  std::set<double> distinct;
  for (std::size_t i = 0; i < d.n(); ++i) distinct.insert(d.marker(i, j));
  if (distinct.size() <= points) return {distinct.begin(), distinct.end()};
  std::vector<double> col(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) col[i] = d.marker(i, j);
  std::vector<double> grid;
  for (std::size_t k = 0; k < points; ++k)
    grid.push_back(quantile(col, static_cast<double>(k) / static_cast<double>(points - 1)));
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"predMOB forests for predictive biomarker identification under confounding"};
  app.require_subcommand(1);

  // scenarios list
  auto* scen = app.add_subcommand("scenarios", "Builtin simulation scenarios");
  auto* scen_list = scen->add_subcommand("list", "List scenario ids");
  bool scen_json = false;
  scen_list->add_flag("--json", scen_json, "Print full specs as JSON");
  scen->require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a scenario dataset");
  std::string sim_id;
  std::size_t sim_n = 0;
  std::uint64_t sim_seed = 0;
  fs::path sim_out;
  sim->add_option("--scenario", sim_id, "Scenario id")->required();
  sim->add_option("--n", sim_n, "Sample size (default: scenario default)");
  sim->add_option("--seed", sim_seed, "Random seed")->required();
  sim->add_option("--out", sim_out, "Output CSV")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "Fit a predMOB forest");
  fs::path fit_data, fit_out, fit_config;
  std::string fit_adjust = "none";
  std::optional<std::string> fit_weights;
  ForestConfig fc;
  std::uint64_t fit_seed = 0;
  fit->add_option("--data", fit_data, "Input CSV")->required();
  fit->add_option("--adjust", fit_adjust, "none|covariate|iptw|match_exact|match_full|doubly_robust");
  fit->add_option("--trees", fc.n_trees, "Number of trees");
  fit->add_option("--subsample", fc.subsample_frac, "Subsample fraction");
  fit->add_option("--alpha", fc.tree.alpha, "Split significance level");
  fit->add_option("--mtry", fc.tree.mtry, "Candidate variables per node (0 = all)");
  fit->add_option("--max-depth", fc.tree.max_depth, "Maximum tree depth");
  fit->add_option("--threads", fc.threads, "Worker threads");
  fit->add_option("--config", fit_config, "Forest config JSON (command-line options override)");
  fit->add_option("--weights-column", fit_weights, "Case-weight column in the CSV");
  fit->add_option("--seed", fit_seed, "Random seed")->required();
  fit->add_option("--out", fit_out, "Output forest JSON")->required();

  // importance
  auto* imp = app.add_subcommand("importance", "Permutation importance and mean minimal depth");
  fs::path imp_forest, imp_data, imp_out;
  std::optional<std::uint64_t> imp_seed;
  imp->add_option("--forest", imp_forest, "Forest JSON")->required();
  imp->add_option("--data", imp_data, "Training CSV")->required();
  imp->add_option("--seed", imp_seed, "Permutation seed (default: forest seed)");
  imp->add_option("--out", imp_out, "Output CSV (or .json)")->required();

  // pdp
  auto* pdp = app.add_subcommand("pdp", "Partial dependence of the ITE on one biomarker");
  fs::path pdp_forest, pdp_data, pdp_out;
  std::string pdp_var;
  std::vector<double> pdp_grid;
  std::size_t pdp_points = 20;
  pdp->add_option("--forest", pdp_forest, "Forest JSON")->required();
  pdp->add_option("--data", pdp_data, "CSV")->required();
  pdp->add_option("--var", pdp_var, "Biomarker name")->required();
  pdp->add_option("--grid", pdp_grid, "Grid values (default: distinct values or quantiles)");
  pdp->add_option("--points", pdp_points, "Quantile grid size for continuous variables");
  pdp->add_option("--out", pdp_out, "Output CSV")->required();

  // weights
  auto* wts = app.add_subcommand("weights", "Adjustment weights");
  fs::path w_data, w_out;
  std::string w_method;
  std::string w_estimand = "ate";
  bool w_no_stabilize = false, w_no_trim = false;
  double w_trim = 0.99;
  wts->add_option("--data", w_data, "CSV")->required();
  wts->add_option("--method", w_method, "iptw|match-exact|match-full")
      ->required()
      ->check(CLI::IsMember({"iptw", "match-exact", "match-full"}));
  wts->add_option("--estimand", w_estimand, "ate|att (iptw)")->check(CLI::IsMember({"ate", "att"}));
  wts->add_flag("--no-stabilize", w_no_stabilize, "Unstabilized IPTW weights");
  wts->add_option("--trim", w_trim, "Trimming quantile (iptw)");
  wts->add_flag("--no-trim", w_no_trim, "Disable trimming (iptw)");
  wts->add_option("--out", w_out, "Output CSV")->required();

  // balance
  auto* bal = app.add_subcommand("balance", "Covariate balance before and after weighting");
  fs::path b_data, b_weights, b_out;
  bal->add_option("--data", b_data, "CSV")->required();
  bal->add_option("--weights", b_weights, "Weights CSV with a 'weight' column")->required();
  bal->add_option("--out", b_out, "Output CSV (default: stdout)");

  // experiment
  auto* exp = app.add_subcommand("experiment", "Simulation experiments");
  fs::path exp_config;
  std::optional<std::string> exp_out;
  std::optional<unsigned> exp_threads;
  auto* exp_ident = exp->add_subcommand("identify", "Identification of predictive factors");
  auto* exp_acc = exp->add_subcommand("accuracy", "Accuracy of predicted treatment effects");
  for (auto* sc : {exp_ident, exp_acc}) {
    sc->add_option("--config", exp_config, "Experiment config JSON")->required();
    sc->add_option("--out", exp_out, "Output directory (overrides config)");
    sc->add_option("--threads", exp_threads, "Worker threads (overrides config)");
  }
  exp->require_subcommand(1);

  // report
  auto* rep = app.add_subcommand("report", "Summarize experiment results");
  fs::path rep_dir;
  rep->add_option("--dir", rep_dir, "Results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*scen) {
      const auto all = builtin_scenarios();
      if (scen_json) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& [id, s] : all) j.push_back(to_json(s));
        std::cout << j.dump(2) << '\n';
      } else {
        for (const auto& [id, s] : all)
          std::cout << id << '\t' << (s.family == ScenarioFamily::kAccuracy ? "accuracy" : "identification")
                    << "\tn=" << s.n << "\tp=" << s.n_markers() << '\t' << s.description << '\n';
      }
    } else if (*sim) {
      const auto spec = scenario(sim_id);
      const auto sample = generate(spec, sim_n ? sim_n : spec.n, sim_seed);
      if (sim_out.has_parent_path()) fs::create_directories(sim_out.parent_path());
      save_csv(sample.dataset, sim_out, {{"true_ite", sample.true_ite}});
      auto side = dataset_sidecar(sample.dataset);
      side["scenario"] = spec.id;
      side["seed"] = sim_seed;
      side["beta0"] = sample.beta0;
      side["extra_columns"] = {"true_ite"};
      write_json(side, sidecar_path(sim_out));
    } else if (*fit) {
      const auto strategy = strategy_from_string(fit_adjust);
      ForestConfig cfg = fc;
      if (!fit_config.empty()) {
        cfg = forest_config_from_json(read_json(fit_config));
        for (const auto* opt : fit->get_options()) {
          if (opt->count() == 0) continue;
          const auto name = opt->get_name();
          if (name == "--trees") cfg.n_trees = fc.n_trees;
          else if (name == "--subsample") cfg.subsample_frac = fc.subsample_frac;
          else if (name == "--alpha") cfg.tree.alpha = fc.tree.alpha;
          else if (name == "--mtry") cfg.tree.mtry = fc.tree.mtry;
          else if (name == "--max-depth") cfg.tree.max_depth = fc.tree.max_depth;
          else if (name == "--threads") cfg.threads = fc.threads;
        }
      }
      cfg.seed = fit_seed;
      const auto d = load_dataset(fit_data, fit_weights);
      const auto plan = build_plan(d, strategy);
      warn(plan.warnings);
      const auto forest = fit_forest(d, plan, cfg);
      warn(forest.warnings);
      write_json(to_json(forest), fit_out);
    } else if (*imp) {
      const auto forest = forest_from_json(read_json(imp_forest));
      const auto d = load_dataset(imp_data, std::nullopt);
      const auto table = importance(forest, d, imp_seed.value_or(forest.config.seed));
      if (imp_out.extension() == ".json") write_json(to_json(table), imp_out);
      else {
        if (imp_out.has_parent_path()) fs::create_directories(imp_out.parent_path());
        write_importance_csv(table, imp_out);
      }
    } else if (*pdp) {
      const auto forest = forest_from_json(read_json(pdp_forest));
      const auto d = load_dataset(pdp_data, std::nullopt);
      const auto j = variable_index(d, pdp_var);
      const auto grid = pdp_grid.empty() ? default_grid(d, j, std::max<std::size_t>(pdp_points, 2)) : pdp_grid;
      auto out = open_csv(pdp_out);
      out << "variable,value,ite\n";
      for (const auto& [v, ite] : partial_dependence(forest, d, j, grid))
        out << pdp_var << ',' << csv::format_double(v) << ',' << csv::format_double(ite) << '\n';
    } else if (*wts) {
      const auto d = load_dataset(w_data, std::nullopt);
      AdjustmentPlan plan;
      if (w_method == "iptw") {
        PlanOptions opt;
        opt.iptw.estimand = w_estimand == "att" ? Estimand::kAtt : Estimand::kAte;
        opt.iptw.stabilize = !w_no_stabilize;
        opt.iptw.trim_quantile = w_no_trim ? std::nullopt : std::optional<double>(w_trim);
        plan = build_plan(d, Strategy::kIptw, opt);
      } else {
        plan = build_plan(d, w_method == "match-exact" ? Strategy::kMatchExact : Strategy::kMatchFull);
      }
      warn(plan.warnings);
      auto out = open_csv(w_out);
      out << "row,weight";
      if (plan.propensity) out << ",propensity";
      if (plan.subclass) out << ",subclass";
      out << '\n';
      for (std::size_t i = 0; i < d.n(); ++i) {
        out << i << ',' << csv::format_double(plan.weights.w[i]);
        if (plan.propensity) out << ',' << csv::format_double(plan.propensity->fitted[i]);
        if (plan.subclass) out << ',' << (*plan.subclass)[i];
        out << '\n';
      }
    } else if (*bal) {
      const auto d = load_dataset(b_data, std::nullopt);
      const auto t = csv::read_table(b_weights);
      const auto col = t.column_index("weight", b_weights.string());
      if (t.rows.size() != d.n())
        throw DataError(b_weights.string() + ": " + std::to_string(t.rows.size()) + " weights for " +
                        std::to_string(d.n()) + " rows");
      std::vector<double> w(d.n());
      for (std::size_t i = 0; i < d.n(); ++i)
        if (!csv::parse_double(t.rows[i][col], w[i]) || !(w[i] >= 0.0))
          throw DataError(b_weights.string() + ": bad weight on data row " + std::to_string(i + 1));
      const auto report_ = covariate_balance(d, w);
      std::ofstream file;
      if (!b_out.empty()) file = open_csv(b_out);
      std::ostream& out = b_out.empty() ? std::cout : file;
      auto opt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string("NA"); };
      out << "variable,raw_mean_diff,weighted_mean_diff,raw_std_diff,weighted_std_diff\n";
      for (const auto& e : report_.entries)
        out << e.variable << ',' << csv::format_double(e.raw_mean_diff) << ','
            << csv::format_double(e.weighted_mean_diff) << ',' << opt(e.raw_standardized) << ','
            << opt(e.weighted_standardized) << '\n';
    } else if (*exp) {
      auto cfg = load_experiment_config(exp_config);
      if (exp_out) cfg.output_dir = *exp_out;
      if (exp_threads) cfg.threads = *exp_threads;
      if (*exp_ident) {
        const auto res = run_identification(cfg);
        if (!res.failures.empty()) std::cerr << res.failures.size() << " failed run/adjustment units skipped\n";
      } else {
        const auto res = run_accuracy(cfg);
        if (!res.failures.empty()) std::cerr << res.failures.size() << " failed run/adjustment units skipped\n";
      }
    } else if (*rep) {
      report(rep_dir);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ExperimentFailure& e) {
    std::cerr << "experiment failed: " << e.what() << '\n';
    return kExitExperiment;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
