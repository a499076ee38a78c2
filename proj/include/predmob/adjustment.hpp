#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/glm.hpp"
#include "predmob/min_cost_flow.hpp"
#include "predmob/numeric.hpp"

namespace predmob {

enum class Strategy { kNone, kCovariate, kIptw, kMatchExact, kMatchFull, kDoublyRobust };

inline constexpr Strategy kAllStrategies[] = {Strategy::kNone,       Strategy::kCovariate,
                                              Strategy::kIptw,       Strategy::kMatchExact,
                                              Strategy::kMatchFull,  Strategy::kDoublyRobust};

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kNone: return "none";
    case Strategy::kCovariate: return "covariate";
    case Strategy::kIptw: return "iptw";
    case Strategy::kMatchExact: return "match_exact";
    case Strategy::kMatchFull: return "match_full";
    case Strategy::kDoublyRobust: return "doubly_robust";
  }
  return "none";
}

inline Strategy strategy_from_string(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (auto st : kAllStrategies)
    if (to_string(st) == s) return st;
  throw UsageError("unknown adjustment strategy '" + s +
                   "' (expected none, covariate, iptw, match_exact, match_full, doubly_robust)");
}

enum class Estimand { kAte, kAtt };

struct IptwOptions {
  Estimand estimand = Estimand::kAte;
  bool stabilize = true;
  std::optional<double> trim_quantile = 0.99;
  bool rescale = true;
};

/// Declarative adjustment strategy plus its fitted artifacts.
struct AdjustmentPlan {
  Strategy strategy = Strategy::kNone;
  std::optional<LogisticFit> propensity;
  CaseWeights weights;
  std::optional<std::vector<int>> subclass;  // -1 marks a discarded observation
  std::vector<std::size_t> global_covariates;
  std::vector<std::string> warnings;

  std::size_t retained() const {
    std::size_t c = 0;
    for (double w : weights.w) c += w > 0.0 ? 1 : 0;
    return c;
  }
  bool uses_palm() const {
    return strategy == Strategy::kCovariate || strategy == Strategy::kDoublyRobust;
  }
};

inline std::vector<std::size_t> all_columns(const Dataset& d) {
  std::vector<std::size_t> c(d.p());
  std::iota(c.begin(), c.end(), 0);
  return c;
}

/// Logistic model of treatment on an intercept plus the given biomarkers.
inline LogisticFit fit_propensity(const Dataset& d, std::vector<std::size_t> columns = {}) {
  if (columns.empty()) columns = all_columns(d);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d.n()), static_cast<Eigen::Index>(columns.size() + 1));
  std::vector<double> t(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = 1.0;
    for (std::size_t k = 0; k < columns.size(); ++k)
      x(r, static_cast<Eigen::Index>(k + 1)) = d.marker(i, columns[k]);
    t[i] = d.treatment()[i];
  }
  return fit_logistic(x, t, std::vector<double>(d.n(), 1.0));
}

/// Inverse-probability-of-treatment weights from fitted propensities.
inline CaseWeights iptw_weights(std::span<const double> propensity, std::span<const int> treatment,
                                Estimand estimand, bool stabilize,
                                std::optional<double> trim_quantile, bool rescale) {
  const std::size_t n = treatment.size();
  if (propensity.size() != n) throw UsageError("iptw_weights: length mismatch");
  double p_treated = 0.0;
  for (int t : treatment) p_treated += t;
  p_treated /= static_cast<double>(n);

  CaseWeights out;
  out.w.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = propensity[i];
    if (!(e > 0.0 && e < 1.0)) throw DataError("iptw_weights: propensity outside (0, 1)");
    double w;
    if (estimand == Estimand::kAte)
      w = treatment[i] == 1 ? 1.0 / e : 1.0 / (1.0 - e);
    else
      w = treatment[i] == 1 ? 1.0 : e / (1.0 - e);
    if (stabilize) w *= treatment[i] == 1 ? p_treated : 1.0 - p_treated;
    out.w[i] = w;
  }
  if (trim_quantile) {
    const double q = *trim_quantile;
    if (!(q > 0.5 && q <= 1.0)) throw UsageError("trim quantile must lie in (0.5, 1]");
    const double hi = quantile(out.w, q);
    const double lo = quantile(out.w, 1.0 - q);
    for (double& w : out.w) w = std::clamp(w, lo, hi);
  }
  if (rescale) out.rescale_to(static_cast<double>(n));
  return out;
}

inline CaseWeights iptw_weights(const LogisticFit& propensity, std::span<const int> treatment,
                                Estimand estimand, bool stabilize,
                                std::optional<double> trim_quantile, bool rescale) {
  return iptw_weights(propensity.fitted, treatment, estimand, stabilize, trim_quantile, rescale);
}

namespace detail {

// Treated weight 1, control weight n_t / n_c within each subclass; discarded
// observations (subclass -1) get weight 0. Rescaled to the retained count.
inline CaseWeights subclass_weights(const std::vector<int>& subclass, std::span<const int> treatment) {
  std::map<int, std::pair<double, double>> counts;  // treated, control
  for (std::size_t i = 0; i < subclass.size(); ++i) {
    if (subclass[i] < 0) continue;
    auto& c = counts[subclass[i]];
    (treatment[i] == 1 ? c.first : c.second) += 1.0;
  }
  CaseWeights out;
  out.w.assign(subclass.size(), 0.0);
  std::size_t retained = 0;
  for (std::size_t i = 0; i < subclass.size(); ++i) {
    if (subclass[i] < 0) continue;
    const auto& c = counts[subclass[i]];
    out.w[i] = treatment[i] == 1 ? 1.0 : c.first / c.second;
    ++retained;
  }
  out.rescale_to(static_cast<double>(retained));
  return out;
}

}  // namespace detail

/// Strata of identical covariate patterns containing both arms.
inline AdjustmentPlan exact_match(const Dataset& d, std::vector<std::size_t> columns = {}) {
  if (columns.empty()) columns = all_columns(d);
  std::map<std::vector<double>, std::pair<std::vector<std::size_t>, std::size_t>> strata;
  for (std::size_t i = 0; i < d.n(); ++i) {
    std::vector<double> key(columns.size());
    for (std::size_t k = 0; k < columns.size(); ++k) key[k] = d.marker(i, columns[k]);
    auto& s = strata[key];
    s.first.push_back(i);
    s.second += static_cast<std::size_t>(d.treatment()[i]);
  }
  std::vector<int> subclass(d.n(), -1);
  int next = 0;
  for (const auto& [key, s] : strata) {
    if (s.second == 0 || s.second == s.first.size()) continue;
    for (auto i : s.first) subclass[i] = next;
    ++next;
  }
  if (next == 0)
    throw InfeasiblePlanError("exact matching infeasible: no covariate pattern contains both arms (" +
                              std::to_string(strata.size()) + " distinct patterns)");
  AdjustmentPlan plan;
  plan.strategy = Strategy::kMatchExact;
  plan.weights = detail::subclass_weights(subclass, d.treatment());
  plan.subclass = std::move(subclass);
  const auto kept = plan.retained();
  if (kept < d.n())
    plan.warnings.push_back("exact matching discarded " + std::to_string(d.n() - kept) + " of " +
                            std::to_string(d.n()) + " observations");
  return plan;
}

struct FullMatchResult {
  std::vector<int> subclass;
  double cost = 0.0;
};

/// Optimal full matching on a scalar distance |s_i - s_j| between treated and
/// control units, solved as a min-cost flow.
///
/// A full matching is a partition into stars (one treated with >= 1 controls
/// or one control with >= 1 treated) and its cost is the sum over the star
/// edges, i.e. a minimum-cost edge cover of the complete bipartite graph.
/// Units sharing arm and score are pooled into one network node; forcing arcs
/// of cost -M with capacity equal to the pool size make every unit covered.
inline FullMatchResult full_match_scores(std::span<const double> score, std::span<const int> treatment) {
  const std::size_t n = score.size();
  std::map<double, std::vector<std::size_t>> tg, cg;
  for (std::size_t i = 0; i < n; ++i) (treatment[i] == 1 ? tg : cg)[score[i]].push_back(i);
  if (tg.empty() || cg.empty()) throw DataError("full matching needs both arms");

  std::vector<std::pair<double, std::vector<std::size_t>>> tgroups(tg.begin(), tg.end());
  std::vector<std::pair<double, std::vector<std::size_t>>> cgroups(cg.begin(), cg.end());
  const int nt = static_cast<int>(tgroups.size());
  const int nc = static_cast<int>(cgroups.size());
  const int source = nt + nc, sink = nt + nc + 1;

  double max_d = 0.0;
  for (const auto& [a, ua] : tgroups)
    for (const auto& [b, ub] : cgroups) max_d = std::max(max_d, std::abs(a - b));
  const double big = 2.0 * max_d + 1.0;

  MinCostFlow net(nt + nc + 2);
  for (int g = 0; g < nt; ++g) {
    net.add_arc(source, g, static_cast<MinCostFlow::Flow>(tgroups[static_cast<std::size_t>(g)].second.size()), -big);
    net.add_arc(source, g, MinCostFlow::kInfinite, 0.0);
  }
  for (int h = 0; h < nc; ++h) {
    net.add_arc(nt + h, sink, static_cast<MinCostFlow::Flow>(cgroups[static_cast<std::size_t>(h)].second.size()), -big);
    net.add_arc(nt + h, sink, MinCostFlow::kInfinite, 0.0);
  }
  std::vector<std::vector<int>> pair_arc(static_cast<std::size_t>(nt), std::vector<int>(static_cast<std::size_t>(nc)));
  for (int g = 0; g < nt; ++g)
    for (int h = 0; h < nc; ++h)
      pair_arc[static_cast<std::size_t>(g)][static_cast<std::size_t>(h)] = net.add_arc(
          g, nt + h, MinCostFlow::kInfinite,
          std::abs(tgroups[static_cast<std::size_t>(g)].first - cgroups[static_cast<std::size_t>(h)].first));
  net.solve(source, sink);

  // Realise pooled flows as unit-level edges, cycling through each pool.
  std::vector<std::size_t> tcur(static_cast<std::size_t>(nt), 0), ccur(static_cast<std::size_t>(nc), 0);
  std::set<std::pair<std::size_t, std::size_t>> edges;
  for (int g = 0; g < nt; ++g) {
    const auto& tu = tgroups[static_cast<std::size_t>(g)].second;
    for (int h = 0; h < nc; ++h) {
      const auto& cu = cgroups[static_cast<std::size_t>(h)].second;
      auto f = net.flow_on(pair_arc[static_cast<std::size_t>(g)][static_cast<std::size_t>(h)]);
      for (; f > 0; --f) {
        edges.emplace(tu[tcur[static_cast<std::size_t>(g)]++ % tu.size()],
                      cu[ccur[static_cast<std::size_t>(h)]++ % cu.size()]);
      }
    }
  }

  // Prune to a minimal edge cover (a star forest).
  std::vector<int> degree(n, 0);
  for (const auto& [a, b] : edges) {
    ++degree[a];
    ++degree[b];
  }
  std::vector<std::pair<std::size_t, std::size_t>> ordered(edges.begin(), edges.end());
  std::stable_sort(ordered.begin(), ordered.end(), [&](const auto& x, const auto& y) {
    return std::abs(score[x.first] - score[x.second]) > std::abs(score[y.first] - score[y.second]);
  });
  std::vector<std::pair<std::size_t, std::size_t>> kept;
  for (const auto& [a, b] : ordered) {
    if (degree[a] > 1 && degree[b] > 1) {
      --degree[a];
      --degree[b];
    } else {
      kept.emplace_back(a, b);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (degree[i] < 1) throw Error("full matching: internal error, uncovered unit");

  // Connected components of the star forest are the subclasses.
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  FullMatchResult res;
  for (const auto& [a, b] : kept) {
    parent[find(a)] = find(b);
    res.cost += std::abs(score[a] - score[b]);
  }
  res.subclass.assign(n, -1);
  std::map<std::size_t, int> label;
  for (std::size_t i = 0; i < n; ++i) {
    const auto root = find(i);
    auto it = label.find(root);
    if (it == label.end()) it = label.emplace(root, static_cast<int>(label.size())).first;
    res.subclass[i] = it->second;
  }
  return res;
}

/// Full matching on the propensity logit.
inline AdjustmentPlan full_match(const Dataset& d, const LogisticFit& propensity) {
  std::vector<double> s(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) s[i] = logit(propensity.fitted[i]);
  auto m = full_match_scores(s, d.treatment());
  AdjustmentPlan plan;
  plan.strategy = Strategy::kMatchFull;
  plan.propensity = propensity;
  plan.weights = detail::subclass_weights(m.subclass, d.treatment());
  plan.subclass = std::move(m.subclass);
  return plan;
}

struct PlanOptions {
  IptwOptions iptw;
  std::vector<std::size_t> columns;  // empty: all biomarkers
};

inline AdjustmentPlan build_plan(const Dataset& d, Strategy strategy, const PlanOptions& opt = {}) {
  const auto columns = opt.columns.empty() ? all_columns(d) : opt.columns;
  AdjustmentPlan plan;
  switch (strategy) {
    case Strategy::kNone:
      plan.weights = d.case_weights() ? CaseWeights{*d.case_weights(), false}
                                      : CaseWeights::ones(d.n());
      break;
    case Strategy::kCovariate:
      plan.weights = CaseWeights::ones(d.n());
      plan.global_covariates = columns;
      break;
    case Strategy::kIptw:
    case Strategy::kDoublyRobust: {
      plan.propensity = fit_propensity(d, columns);
      plan.weights = iptw_weights(*plan.propensity, d.treatment(), opt.iptw.estimand,
                                  opt.iptw.stabilize, opt.iptw.trim_quantile, opt.iptw.rescale);
      if (strategy == Strategy::kDoublyRobust) plan.global_covariates = columns;
      break;
    }
    case Strategy::kMatchExact:
      plan = exact_match(d, columns);
      break;
    case Strategy::kMatchFull:
      plan = full_match(d, fit_propensity(d, columns));
      break;
  }
  plan.strategy = strategy;
  if (plan.propensity)
    for (const auto& w : plan.propensity->warnings) plan.warnings.push_back(w);
  if (d.case_weights() && strategy != Strategy::kNone)
    plan.warnings.push_back("dataset case weights ignored by strategy " + to_string(strategy));
  return plan;
}

// ---------------------------------------------------------------------------
// Diagnostics and reference estimators

struct BalanceEntry {
  std::string variable;
  double raw_mean_diff = 0.0;
  double weighted_mean_diff = 0.0;
  std::optional<double> raw_standardized;
  std::optional<double> weighted_standardized;
};

struct BalanceReport {
  std::vector<BalanceEntry> entries;
};

/// Treated-minus-control mean differences, raw and weighted, standardised by
/// the pooled unweighted SD sqrt((s_t^2 + s_c^2) / 2).
inline BalanceReport covariate_balance(const Dataset& d, std::span<const double> weights) {
  if (weights.size() != d.n()) throw UsageError("covariate_balance: weights length mismatch");
  BalanceReport rep;
  for (std::size_t j = 0; j < d.p(); ++j) {
    double s[2] = {0, 0}, ss[2] = {0, 0}, cnt[2] = {0, 0}, ws[2] = {0, 0}, wt[2] = {0, 0};
    for (std::size_t i = 0; i < d.n(); ++i) {
      const int a = d.treatment()[i];
      const double x = d.marker(i, j);
      s[a] += x;
      ss[a] += x * x;
      cnt[a] += 1.0;
      ws[a] += weights[i] * x;
      wt[a] += weights[i];
    }
    BalanceEntry e;
    e.variable = d.names()[j];
    e.raw_mean_diff = s[1] / cnt[1] - s[0] / cnt[0];
    const double m1 = wt[1] > 0 ? ws[1] / wt[1] : std::numeric_limits<double>::quiet_NaN();
    const double m0 = wt[0] > 0 ? ws[0] / wt[0] : std::numeric_limits<double>::quiet_NaN();
    e.weighted_mean_diff = m1 - m0;
    auto var = [&](int a) {
      if (cnt[a] < 2) return 0.0;
      const double m = s[a] / cnt[a];
      return std::max(0.0, (ss[a] - cnt[a] * m * m) / (cnt[a] - 1.0));
    };
    const double sd = std::sqrt((var(0) + var(1)) / 2.0);
    if (sd > 0.0) {
      e.raw_standardized = e.raw_mean_diff / sd;
      if (std::isfinite(e.weighted_mean_diff)) e.weighted_standardized = e.weighted_mean_diff / sd;
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

/// D = (T_1 - T_2)(Y_1 - Y_2) for pairs with exactly one treated member.
inline std::vector<double> matched_pair_differences(
    const Dataset& d, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    const int ta = d.treatment()[a], tb = d.treatment()[b];
    if (ta == tb) throw DataError("matched pair (" + std::to_string(a) + ", " + std::to_string(b) +
                                  ") lies in one arm");
    out.push_back(static_cast<double>(ta - tb) * (d.outcome()[a] - d.outcome()[b]));
  }
  return out;
}

/// Weighted least squares of Y on (1, T, M, M*T); coefficients are
/// (alpha, beta_T, beta_M, gamma).
inline LinearFit msm_interaction_fit(const Dataset& d, std::size_t modifier,
                                     std::span<const double> weights) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(d.n()), 4);
  for (std::size_t i = 0; i < d.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double t = d.treatment()[i], m = d.marker(i, modifier);
    x(r, 0) = 1.0;
    x(r, 1) = t;
    x(r, 2) = m;
    x(r, 3) = m * t;
  }
  return fit_wls(x, d.outcome(), weights);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const BalanceReport& rep) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : rep.entries) {
    nlohmann::json j = {{"variable", e.variable},
                        {"raw_mean_diff", e.raw_mean_diff},
                        {"weighted_mean_diff", e.weighted_mean_diff}};
    j["raw_standardized"] = e.raw_standardized ? nlohmann::json(*e.raw_standardized) : nlohmann::json();
    j["weighted_standardized"] =
        e.weighted_standardized ? nlohmann::json(*e.weighted_standardized) : nlohmann::json();
    arr.push_back(std::move(j));
  }
  return {{"balance", arr}};
}

inline nlohmann::json to_json(const AdjustmentPlan& plan) {
  nlohmann::json j;
  j["strategy"] = to_string(plan.strategy);
  j["weights"] = plan.weights.w;
  j["rescaled"] = plan.weights.rescaled;
  j["global_covariates"] = plan.global_covariates;
  if (plan.subclass) j["subclasses"] = *plan.subclass;
  if (plan.propensity) {
    std::vector<double> coef(plan.propensity->coef.data(),
                             plan.propensity->coef.data() + plan.propensity->coef.size());
    j["propensity"] = {{"coef", coef},
                       {"fitted", plan.propensity->fitted},
                       {"converged", plan.propensity->converged},
                       {"iterations", plan.propensity->iterations}};
  }
  if (!plan.warnings.empty()) j["warnings"] = plan.warnings;
  return j;
}

inline AdjustmentPlan plan_from_json(const nlohmann::json& j) {
  AdjustmentPlan plan;
  plan.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  plan.weights.w = j.at("weights").get<std::vector<double>>();
  plan.weights.rescaled = j.value("rescaled", false);
  plan.global_covariates = j.at("global_covariates").get<std::vector<std::size_t>>();
  if (j.contains("subclasses")) plan.subclass = j.at("subclasses").get<std::vector<int>>();
  if (j.contains("propensity")) {
    LogisticFit f;
    const auto coef = j.at("propensity").at("coef").get<std::vector<double>>();
    f.coef = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
    f.fitted = j.at("propensity").at("fitted").get<std::vector<double>>();
    f.converged = j.at("propensity").at("converged").get<bool>();
    f.iterations = j.at("propensity").at("iterations").get<int>();
    plan.propensity = std::move(f);
  }
  if (j.contains("warnings")) plan.warnings = j.at("warnings").get<std::vector<std::string>>();
  return plan;
}

}  // namespace predmob
