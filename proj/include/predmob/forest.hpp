#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmob/adjustment.hpp"
#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/random.hpp"
#include "predmob/tree.hpp"

namespace predmob {

struct ForestConfig {
  std::size_t n_trees = 100;
  double subsample_frac = 0.632;
  TreeConfig tree;
  PalmOptions palm;
  std::uint64_t seed = 1;
  int max_retries = 10;
  unsigned threads = 1;

  std::size_t subsample_size(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(subsample_frac * static_cast<double>(n)));
  }
  void validate(std::size_t p) const {
    if (n_trees < 1) throw UsageError("n_trees must be >= 1");
    if (!(subsample_frac > 0.0 && subsample_frac <= 1.0))
      throw UsageError("subsample_frac must lie in (0, 1]");
    tree.validate(p);
  }
};

struct ForestTree {
  PredMobTree tree;
  std::vector<std::size_t> in_bag;  // ascending row ids
  bool palm = false;
  Eigen::VectorXd gamma;
  std::vector<std::size_t> global_columns;
  int palm_iterations = 0;
  bool palm_converged = true;

  double offset(const Dataset& d, std::size_t i) const {
    if (!palm) return 0.0;
    double o = gamma(0);
    for (std::size_t k = 0; k < global_columns.size(); ++k)
      o += gamma(static_cast<Eigen::Index>(k + 1)) * d.marker(i, global_columns[k]);
    return o;
  }
};

struct PredMobForest {
  std::vector<ForestTree> trees;
  AdjustmentPlan plan;
  ForestConfig config;
  std::vector<std::string> names;
  std::size_t n = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline ForestTree fit_one_tree(const Dataset& d, const AdjustmentPlan& plan,
                               const ForestConfig& cfg, std::size_t t, std::string& warning) {
  const auto m = cfg.subsample_size(d.n());
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    auto sub_rng = make_rng(cfg.seed, Stream::kSubsample, t, static_cast<std::uint64_t>(attempt));
    auto tree_rng = make_rng(cfg.seed, Stream::kTree, t, static_cast<std::uint64_t>(attempt));
    ForestTree ft;
    ft.in_bag = m == d.n() ? all_rows(d.n()) : sample_without_replacement(d.n(), m, sub_rng);
    try {
      if (plan.uses_palm()) {
        auto palm = fit_palm(d, ft.in_bag, plan.global_covariates, plan.weights.w, cfg.tree,
                             tree_rng, cfg.palm);
        ft.palm = !palm.global_columns.empty();
        ft.tree = std::move(palm.tree);
        ft.gamma = std::move(palm.gamma);
        ft.global_columns = std::move(palm.global_columns);
        ft.palm_iterations = palm.iterations;
        ft.palm_converged = palm.converged;
        for (auto& w : palm.warnings) ft.tree.warnings.push_back(std::move(w));
      } else {
        ft.tree = grow_tree(d, ft.in_bag, plan.weights.w, {}, cfg.tree, tree_rng);
      }
      return ft;
    } catch (const DegenerateNodeError&) {
    } catch (const SingularDesignError&) {
    }
  }
  warning = "tree " + std::to_string(t) + ": degenerate subsample after " +
            std::to_string(cfg.max_retries) + " retries, stored as root leaf";
  ForestTree ft;
  ft.in_bag = all_rows(0);
  ft.tree = PredMobTree::root_leaf(0.0);
  ft.tree.warnings.push_back(warning);
  return ft;
}

// Runs body(i) for i in [0, count) on up to `threads` workers; results are
// written by index, so the outcome does not depend on scheduling.
template <typename Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Subsampled predMOB forest. Plan weights are computed once on the full data
/// and restricted to each subsample.
inline PredMobForest fit_forest(const Dataset& d, const AdjustmentPlan& plan,
                                const ForestConfig& config) {
  config.validate(d.p());
  if (plan.weights.size() != d.n()) throw UsageError("fit_forest: plan weights do not match data");
  PredMobForest forest;
  forest.plan = plan;
  forest.config = config;
  forest.names = d.names();
  forest.n = d.n();
  forest.trees.resize(config.n_trees);
  std::vector<std::string> warnings(config.n_trees);
  detail::parallel_for(config.n_trees, config.threads, [&](std::size_t t) {
    forest.trees[t] = detail::fit_one_tree(d, plan, config, t, warnings[t]);
  });
  for (auto& w : warnings)
    if (!w.empty()) forest.warnings.push_back(std::move(w));
  return forest;
}

/// Mean over trees of the leaf treatment effect reached by x.
inline double predict_ite(const PredMobForest& forest, std::span<const double> x) {
  double s = 0.0;
  for (const auto& t : forest.trees) s += t.tree.leaf_value(t.tree.route(x));
  return s / static_cast<double>(forest.trees.size());
}

inline std::vector<double> predict_ite(const PredMobForest& forest, const Dataset& d) {
  std::vector<double> out(d.n(), 0.0);
  for (const auto& t : forest.trees)
    for (std::size_t i = 0; i < d.n(); ++i)
      out[i] += t.tree.leaf_value(t.tree.route_by([&](std::size_t j) { return d.marker(i, j); }));
  for (double& v : out) v /= static_cast<double>(forest.trees.size());
  return out;
}

struct ImportanceTable {
  std::vector<std::string> variables;
  std::vector<double> permutation_importance;
  std::vector<double> mean_minimal_depth;
};

namespace detail {

inline std::vector<std::size_t> out_of_bag(const ForestTree& t, std::size_t n) {
  std::vector<std::size_t> oob;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (k < t.in_bag.size() && t.in_bag[k] == i) {
      ++k;
      continue;
    }
    oob.push_back(i);
  }
  return oob;
}

}  // namespace detail

namespace detail {

/// OOB objective of one tree with column j of OOB row k taken from row
/// oob[perm[k]]. An empty perm leaves every row as it is.
inline double tree_oob_loss(const ForestTree& ft, const Dataset& d, std::span<const double> w,
                            const std::vector<std::size_t>& oob, std::size_t j,
                            const std::vector<std::size_t>& perm) {
  double loss = 0.0;
  for (std::size_t k = 0; k < oob.size(); ++k) {
    const auto i = oob[k];
    const auto src = perm.empty() ? i : oob[perm[k]];
    const int leaf =
        ft.tree.route_by([&](std::size_t v) { return v == j ? d.marker(src, j) : d.marker(i, v); });
    const double r = d.outcome()[i] - ft.offset(d, i) - ft.tree.leaf_value(leaf) * d.t_star()[i] / 2.0;
    loss += w[i] * r * r;
  }
  return loss;
}

}  // namespace detail

/// Per-tree OOB increase of the node-model objective
///   L = sum_oob w_i (y_i - offset_i - b_leaf(x_i) t*_i / 2)^2
/// after permuting one variable among the OOB rows, divided by |OOB| and
/// averaged over trees. Offsets stay at the unpermuted covariates.
inline std::vector<double> permutation_importance(const PredMobForest& forest, const Dataset& d,
                                                  std::uint64_t seed, int repeats = 1) {
  if (d.n() != forest.n || d.p() != forest.names.size())
    throw UsageError("permutation_importance: data does not match the forest");
  if (repeats < 1) throw UsageError("permutation_importance: repeats must be >= 1");
  const std::span<const double> w = forest.plan.weights.w;
  const std::size_t p = d.p();
  std::vector<std::vector<double>> per_tree(forest.trees.size(), std::vector<double>(p, 0.0));

  detail::parallel_for(forest.trees.size(), forest.config.threads, [&](std::size_t t) {
    const auto& ft = forest.trees[t];
    const auto oob = detail::out_of_bag(ft, d.n());
    if (oob.empty()) return;
    const double base = detail::tree_oob_loss(ft, d, w, oob, 0, {});
    const auto used = ft.tree.minimal_depth();
    auto rng = make_rng(seed, Stream::kPermutation, t);
    std::vector<std::size_t> perm(oob.size());
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (int rep = 0; rep < repeats; ++rep) {
        std::iota(perm.begin(), perm.end(), 0);
        shuffle(perm, rng);
        // routing ignores unused variables, so their loss equals base
        if (!used.contains(static_cast<int>(j))) continue;
        acc += (detail::tree_oob_loss(ft, d, w, oob, j, perm) - base) / static_cast<double>(oob.size());
      }
      per_tree[t][j] = acc / repeats;
    }
  });

  std::vector<double> out(p, 0.0);
  for (const auto& row : per_tree)
    for (std::size_t j = 0; j < p; ++j) out[j] += row[j];
  for (double& v : out) v /= static_cast<double>(forest.trees.size());
  return out;
}

/// Average over trees of the depth of the shallowest split on each variable;
/// a variable unused in a tree counts as that tree's max terminal depth + 1.
inline std::vector<double> mean_minimal_depth(const PredMobForest& forest) {
  const std::size_t p = forest.names.size();
  std::vector<double> out(p, 0.0);
  for (const auto& ft : forest.trees) {
    const auto md = ft.tree.minimal_depth();
    const int unused = ft.tree.max_terminal_depth() + 1;
    for (std::size_t j = 0; j < p; ++j) {
      const auto it = md.find(static_cast<int>(j));
      out[j] += it == md.end() ? unused : it->second;
    }
  }
  for (double& v : out) v /= static_cast<double>(forest.trees.size());
  return out;
}

inline ImportanceTable importance(const PredMobForest& forest, const Dataset& d, std::uint64_t seed) {
  return {forest.names, permutation_importance(forest, d, seed), mean_minimal_depth(forest)};
}

/// Forest ITE averaged over all rows with biomarker j clamped to each grid value.
inline std::vector<std::pair<double, double>> partial_dependence(const PredMobForest& forest,
                                                                 const Dataset& d, std::size_t j,
                                                                 const std::vector<double>& grid) {
  std::vector<std::pair<double, double>> curve;
  for (double v : grid) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.n(); ++i) {
      for (const auto& ft : forest.trees)
        s += ft.tree.leaf_value(
            ft.tree.route_by([&](std::size_t c) { return c == j ? v : d.marker(i, c); }));
    }
    curve.emplace_back(v, s / static_cast<double>(d.n() * forest.trees.size()));
  }
  return curve;
}

/// mean(ITE | X_j = 1) - mean(ITE | X_j = 0) over the observed rows.
inline double predictive_effect(const PredMobForest& forest, const Dataset& d, std::size_t j,
                                std::span<const double> ite = {}) {
  if (!d.is_binary(j)) throw DataError("predictive_effect: variable '" + d.names()[j] + "' is not binary");
  std::vector<double> own;
  if (ite.empty()) {
    own = predict_ite(forest, d);
    ite = own;
  }
  double s[2] = {0, 0}, c[2] = {0, 0};
  for (std::size_t i = 0; i < d.n(); ++i) {
    const int level = d.marker(i, j) > 0.5 ? 1 : 0;
    s[level] += ite[i];
    c[level] += 1.0;
  }
  if (c[0] == 0 || c[1] == 0)
    throw DataError("predictive_effect: variable '" + d.names()[j] + "' takes a single value");
  return s[1] / c[1] - s[0] / c[0];
}

// ---------------------------------------------------------------------------
// JSON / CSV

inline nlohmann::json to_json(const ForestConfig& c) {
  return {{"n_trees", c.n_trees},
          {"subsample_frac", c.subsample_frac},
          {"seed", c.seed},
          {"max_retries", c.max_retries},
          {"alpha", c.tree.alpha},
          {"min_node_weight", c.tree.min_node_weight},
          {"min_arm_weight", c.tree.min_arm_weight},
          {"max_depth", c.tree.max_depth},
          {"mtry", c.tree.mtry},
          {"bins", c.tree.bins},
          {"palm_max_alternations", c.palm.max_alternations},
          {"palm_tol", c.palm.tol}};
}

// Missing keys keep the defaults of `base`.
inline ForestConfig forest_config_from_json(const nlohmann::json& j, ForestConfig base = {}) {
  base.n_trees = j.value("n_trees", base.n_trees);
  base.subsample_frac = j.value("subsample_frac", base.subsample_frac);
  base.seed = j.value("seed", base.seed);
  base.max_retries = j.value("max_retries", base.max_retries);
  base.tree.alpha = j.value("alpha", base.tree.alpha);
  base.tree.min_node_weight = j.value("min_node_weight", base.tree.min_node_weight);
  base.tree.min_arm_weight = j.value("min_arm_weight", base.tree.min_arm_weight);
  base.tree.max_depth = j.value("max_depth", base.tree.max_depth);
  base.tree.mtry = j.value("mtry", base.tree.mtry);
  base.tree.bins = j.value("bins", base.tree.bins);
  base.palm.max_alternations = j.value("palm_max_alternations", base.palm.max_alternations);
  base.palm.tol = j.value("palm_tol", base.palm.tol);
  base.threads = j.value("threads", base.threads);
  return base;
}

inline nlohmann::json to_json(const PredMobForest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : f.trees) {
    nlohmann::json jt = {{"in_bag", t.in_bag}, {"tree", to_json(t.tree)}, {"palm", t.palm}};
    if (t.palm) {
      jt["gamma"] = std::vector<double>(t.gamma.data(), t.gamma.data() + t.gamma.size());
      jt["global_columns"] = t.global_columns;
      jt["palm_iterations"] = t.palm_iterations;
      jt["palm_converged"] = t.palm_converged;
    }
    trees.push_back(std::move(jt));
  }
  nlohmann::json j = {{"format", "predmob-forest"}, {"version", 1},      {"names", f.names},
                      {"n", f.n},                   {"config", to_json(f.config)},
                      {"plan", to_json(f.plan)},    {"trees", trees}};
  if (!f.warnings.empty()) j["warnings"] = f.warnings;
  return j;
}

inline PredMobForest forest_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "predmob-forest")
    throw DataError("not a predmob forest document");
  PredMobForest f;
  f.names = j.at("names").get<std::vector<std::string>>();
  f.n = j.at("n").get<std::size_t>();
  f.config = forest_config_from_json(j.at("config"));
  f.plan = plan_from_json(j.at("plan"));
  for (const auto& jt : j.at("trees")) {
    ForestTree t;
    t.in_bag = jt.at("in_bag").get<std::vector<std::size_t>>();
    t.tree = tree_from_json(jt.at("tree"));
    t.palm = jt.at("palm").get<bool>();
    if (t.palm) {
      const auto g = jt.at("gamma").get<std::vector<double>>();
      t.gamma = Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
      t.global_columns = jt.at("global_columns").get<std::vector<std::size_t>>();
      t.palm_iterations = jt.at("palm_iterations").get<int>();
      t.palm_converged = jt.at("palm_converged").get<bool>();
    }
    f.trees.push_back(std::move(t));
  }
  if (j.contains("warnings")) f.warnings = j.at("warnings").get<std::vector<std::string>>();
  if (f.trees.empty()) throw DataError("forest document has no trees");
  return f;
}

inline nlohmann::json to_json(const ImportanceTable& t) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t j = 0; j < t.variables.size(); ++j)
    arr.push_back({{"variable", t.variables[j]},
                   {"permutation_importance", t.permutation_importance[j]},
                   {"mean_minimal_depth", t.mean_minimal_depth[j]}});
  return {{"importance", arr}};
}

/// Long format: variable,metric,value.
inline void write_importance_csv(const ImportanceTable& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "variable,metric,value\n";
  for (std::size_t j = 0; j < t.variables.size(); ++j) {
    out << t.variables[j] << ",permutation_importance," << csv::format_double(t.permutation_importance[j]) << '\n';
    out << t.variables[j] << ",mean_minimal_depth," << csv::format_double(t.mean_minimal_depth[j]) << '\n';
  }
}

}  // namespace predmob
