#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "predmob/harness.hpp"

using namespace predmob;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("predmob_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig quick(std::vector<std::string> sids, std::vector<Strategy> adj, const fs::path& out) {
  ExperimentConfig c;
  c.scenarios = std::move(sids);
  c.adjustments = std::move(adj);
  c.runs = 5;
  c.n = 500;
  c.forest.n_trees = 10;
  c.seed = 11;
  c.output_dir = out;
  return c;
}

}  // namespace

TEST(Metrics, MseDecomposition) {
  const std::vector<double> pred = {1.0, 2.0, 0.5, -1.0}, truth = {0.5, 0.5, 0.5, 0.5};
  const auto m = accuracy_metrics(pred, truth);
  EXPECT_DOUBLE_EQ(m.bias, (0.5 + 1.5 + 0.0 - 1.5) / 4.0);
  EXPECT_NEAR(m.mse, (0.25 + 2.25 + 0.0 + 2.25) / 4.0, 1e-15);
  EXPECT_NEAR(m.variance + m.bias * m.bias, m.mse, 1e-15);
  EXPECT_THROW(accuracy_metrics(pred, std::vector<double>{1.0}), UsageError);
}

TEST(Metrics, Quartiles) {
  const auto q = quartiles({1, 2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(q.q1, 2.0);
  EXPECT_DOUBLE_EQ(q.median, 3.0);
  EXPECT_DOUBLE_EQ(q.q3, 4.0);
}

TEST(Verdicts, IdentifiedAndShallowest) {
  IdentificationSummary s;
  s.variables = {{"a", {0.1, 0.2, 0.3}, {2, 2, 2}}, {"b", {0.3, 0.5, 0.7}, {0, 1, 1}}, {"c", {-0.1, 0.0, 0.1}, {3, 3, 3}}};
  EXPECT_EQ(s.identified(), "b");
  EXPECT_EQ(s.shallowest(), "b");
  EXPECT_EQ(s.clearly_positive(), (std::vector<std::string>{"a", "b"}));
  s.variables[0].importance.median = 0.3;  // more than half of the top
  EXPECT_FALSE(s.identified().has_value());
  s.variables[0].depth.median = 1;
  EXPECT_FALSE(s.shallowest().has_value());
}

TEST(Experiment, RowShapeAndSeeds) {
  const auto out = scratch("shape");
  const auto cfg = quick({"C.1"}, {Strategy::kNone, Strategy::kCovariate, Strategy::kIptw}, out);
  const auto res = identification_rows(cfg);
  EXPECT_EQ(res.rows.size(), 5u * 3u * 10u);
  EXPECT_TRUE(res.failures.empty());
  EXPECT_EQ(res.rows.front().variable, "X1");
  EXPECT_EQ(res.rows[10].adjustment, Strategy::kCovariate);
  EXPECT_NE(run_seeds(11, 0).data, run_seeds(11, 1).data);
  EXPECT_NE(run_seeds(11, 0).data, run_seeds(11, 0).forest);
}

TEST(Experiment, FilesAreReproducible) {
  const auto a = scratch("repro_a"), b = scratch("repro_b");
  auto ca = quick({"B.1"}, {Strategy::kNone, Strategy::kMatchExact}, a);
  auto cb = ca;
  cb.output_dir = b;
  cb.threads = 2;
  run_identification(ca);
  run_identification(cb);
  EXPECT_EQ(slurp(a / "identify_B.1.csv"), slurp(b / "identify_B.1.csv"));
  const auto first = slurp(a / "identify_B.1.csv");
  run_identification(ca);
  EXPECT_EQ(slurp(a / "identify_B.1.csv"), first);

  auto acc = quick({"1"}, {Strategy::kNone, Strategy::kCovariate}, a);
  run_accuracy(acc);
  const auto acc_first = slurp(a / "accuracy_1.csv");
  acc.threads = 2;
  run_accuracy(acc);
  EXPECT_EQ(slurp(a / "accuracy_1.csv"), acc_first);
  EXPECT_EQ(acc_first.substr(0, acc_first.find('\n')),
            "scenario,run,adjustment,bias,variance,mse,predictive_effect_X1,predictive_effect_X2");
}

TEST(Experiment, ReadBackMatchesRows) {
  const auto dir = scratch("readback");
  const auto res = run_identification(quick({"C.1"}, {Strategy::kNone}, dir));
  const auto back = read_identification(dir / "identify_C.1.csv");
  ASSERT_EQ(back.size(), res.rows.size());
  for (std::size_t k = 0; k < back.size(); ++k) {
    EXPECT_EQ(back[k].variable, res.rows[k].variable);
    EXPECT_EQ(back[k].permutation_importance, res.rows[k].permutation_importance);
    EXPECT_EQ(back[k].mean_minimal_depth, res.rows[k].mean_minimal_depth);
  }
  const auto ares = run_accuracy(quick({"2"}, {Strategy::kIptw}, dir));
  const auto aback = read_accuracy(dir / "accuracy_2.csv");
  ASSERT_EQ(aback.size(), ares.rows.size());
  EXPECT_EQ(aback[0].mse, ares.rows[0].mse);
  EXPECT_EQ(aback[0].predictive_effect, ares.rows[0].predictive_effect);
}

TEST(Report, SummaryAndVerdict) {
  const auto dir = scratch("report");
  auto cfg = quick({"C.1"}, {Strategy::kCovariate}, dir);
  cfg.n = 1000;
  cfg.forest.n_trees = 30;
  run_identification(cfg);
  const auto j = report(dir);
  EXPECT_EQ(j["identification"]["C.1"]["covariate"]["verdict"], "X10");
  EXPECT_EQ(j["identification"]["C.1"]["covariate"]["smallest_median_depth"], "X10");
  EXPECT_EQ(j["failures"], 0);
  const auto first = slurp(dir / "summary.json");
  report(dir);
  EXPECT_EQ(slurp(dir / "summary.json"), first);
}

TEST(Report, EmptyDirectoryIsAnError) {
  const auto dir = scratch("empty");
  fs::create_directories(dir);
  EXPECT_THROW(report(dir), DataError);
  EXPECT_THROW(report(dir / "missing"), DataError);
}

TEST(FailurePolicy, AbortAboveThreshold) {
  const auto dir = scratch("fail");
  auto cfg = quick({"J"}, {Strategy::kMatchExact}, dir);
  EXPECT_THROW(identification_rows(cfg), ExperimentFailure);
}

TEST(FailurePolicy, SkipAndLogWhenTolerated) {
  const auto dir = scratch("tolerate");
  auto cfg = quick({"J"}, {Strategy::kNone, Strategy::kMatchExact}, dir);
  cfg.runs = 3;
  cfg.max_failure_fraction = 1.0;
  const auto res = run_identification(cfg);
  EXPECT_EQ(res.failures.size(), 3u);
  EXPECT_EQ(res.rows.size(), 3u * 30u);
  for (const auto& f : res.failures) EXPECT_EQ(f.adjustment, Strategy::kMatchExact);
  const auto table = csv::read_table(dir / "failures_identify.csv");
  EXPECT_EQ(table.rows.size(), 3u);
}

TEST(Config, JsonParsing) {
  const auto c = experiment_config_from_json(nlohmann::json::parse(
      R"({"scenario": "C.1", "runs": 7, "adjustments": ["none", "match-full"], "forest": {"n_trees": 12}})"));
  EXPECT_EQ(c.scenarios, std::vector<std::string>{"C.1"});
  EXPECT_EQ(c.runs, 7u);
  EXPECT_EQ(c.adjustments, (std::vector<Strategy>{Strategy::kNone, Strategy::kMatchFull}));
  EXPECT_EQ(c.forest.n_trees, 12u);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"scenario": "nope"})")), UsageError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"runs": 3})")), UsageError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"scenario": "A", "adjustments": ["x"]})")),
               UsageError);
  EXPECT_THROW(load_experiment_config("/nonexistent/cfg.json"), DataError);
  ExperimentConfig acc;
  acc.scenarios = {"A"};
  EXPECT_THROW(accuracy_rows(acc), UsageError);
}
