#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/numeric.hpp"
#include "predmob/random.hpp"

namespace predmob {

struct TreatmentTerm {
  double coef;
  std::size_t var;
};

// coef * prod(x_v for v in vars) * (T if with_treatment). An empty `vars`
// with with_treatment is the treatment main effect.
struct MuTerm {
  double coef;
  std::vector<std::size_t> vars;
  bool with_treatment = false;
};

struct CorrPair {
  std::size_t i;
  std::size_t j;
  double rho;
};

enum class ScenarioFamily { kIdentification, kAccuracy };

struct ScenarioSpec {
  std::string id;
  std::string description;
  ScenarioFamily family = ScenarioFamily::kIdentification;
  std::size_t p = 10;
  std::size_t extra_nuisance = 0;
  std::vector<TreatmentTerm> treatment_terms;
  std::vector<MuTerm> mu_terms;
  double noise_sd = 0.5;
  std::vector<CorrPair> corr_pairs;
  std::size_t n = 1000;
  double target_p_treated = 0.5;

  std::size_t n_markers() const { return p + extra_nuisance; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < p; ++j) out.push_back("X" + std::to_string(j + 1));
    for (std::size_t j = 0; j < extra_nuisance; ++j) out.push_back("V" + std::to_string(j + 1));
    return out;
  }

  void validate() const {
    const auto m = n_markers();
    for (const auto& t : treatment_terms)
      if (!std::isfinite(t.coef) || t.var >= m) throw UsageError("scenario " + id + ": bad treatment term");
    for (const auto& t : mu_terms) {
      if (!std::isfinite(t.coef)) throw UsageError("scenario " + id + ": non-finite outcome coefficient");
      for (auto v : t.vars)
        if (v >= m) throw UsageError("scenario " + id + ": outcome term index out of range");
    }
    std::vector<int> paired(m, 0);
    for (const auto& c : corr_pairs) {
      if (c.i >= m || c.j >= m || c.i == c.j || std::abs(c.rho) > 1.0)
        throw UsageError("scenario " + id + ": bad correlation pair");
      if (paired[c.i]++ || paired[c.j]++)
        throw UsageError("scenario " + id + ": a variable appears in two correlation pairs");
    }
    if (!(noise_sd >= 0.0) || !(target_p_treated > 0.0 && target_p_treated < 1.0))
      throw UsageError("scenario " + id + ": bad noise or target");
  }

  double eta(const double* x) const {
    double s = 0.0;
    for (const auto& t : treatment_terms) s += t.coef * x[t.var];
    return s;
  }

  double mu(const double* x, int treatment) const {
    double s = 0.0;
    for (const auto& t : mu_terms) {
      if (t.with_treatment && treatment == 0) continue;
      double term = t.coef;
      for (auto v : t.vars) term *= x[v];
      s += term;
    }
    return s;
  }

  // mu(x, 1) - mu(x, 0), summed over the treatment terms only so that it is exact.
  double true_ite(const double* x) const {
    double s = 0.0;
    for (const auto& t : mu_terms) {
      if (!t.with_treatment) continue;
      double term = t.coef;
      for (auto v : t.vars) term *= x[v];
      s += term;
    }
    return s;
  }
};

struct CellProbabilities {
  double p00, p01, p10, p11;
};

/// Joint cells of two Bin(1, 0.5) variables with Pearson correlation rho.
inline CellProbabilities correlated_binary_pair(double rho) {
  if (std::abs(rho) > 1.0) throw UsageError("correlation must lie in [-1, 1]");
  const double same = 0.25 * (1.0 + rho);
  const double diff = 0.25 * (1.0 - rho);
  return {same, diff, diff, same};
}

/// Intercept b0 with E[expit(b0 + eta(X))] = target, by enumerating the
/// joint distribution of the covariates entering eta and bisecting.
inline double solve_intercept(const ScenarioSpec& spec) {
  spec.validate();
  const auto m = spec.n_markers();
  std::vector<int> partner(m, -1);
  std::vector<double> rho(m, 0.0);
  for (const auto& c : spec.corr_pairs) {
    partner[c.i] = static_cast<int>(c.j);
    partner[c.j] = static_cast<int>(c.i);
    rho[c.i] = rho[c.j] = c.rho;
  }
  std::vector<std::size_t> vars;
  auto add = [&](std::size_t v) {
    if (std::find(vars.begin(), vars.end(), v) == vars.end()) vars.push_back(v);
  };
  for (const auto& t : spec.treatment_terms) {
    add(t.var);
    if (partner[t.var] >= 0) add(static_cast<std::size_t>(partner[t.var]));
  }
  if (vars.size() > 20) throw UsageError("solve_intercept: too many treatment-model covariates");

  std::vector<double> eta_values, probs;
  std::vector<double> x(m, 0.0);
  for (std::uint32_t mask = 0; mask < (1u << vars.size()); ++mask) {
    for (std::size_t k = 0; k < vars.size(); ++k) x[vars[k]] = (mask >> k) & 1u;
    double prob = 1.0;
    for (std::size_t k = 0; k < vars.size(); ++k) {
      const auto v = vars[k];
      if (partner[v] < 0) {
        prob *= 0.5;
      } else if (static_cast<std::size_t>(partner[v]) > v) {
        const auto cells = correlated_binary_pair(rho[v]);
        const bool a = x[v] > 0.5, b = x[static_cast<std::size_t>(partner[v])] > 0.5;
        prob *= a ? (b ? cells.p11 : cells.p10) : (b ? cells.p01 : cells.p00);
      }
    }
    eta_values.push_back(spec.eta(x.data()));
    probs.push_back(prob);
  }
  auto expected = [&](double b0) {
    double s = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) s += probs[k] * expit(b0 + eta_values[k]);
    return s;
  };
  double lo = -50.0, hi = 50.0;
  double mid = 0.0;
  for (int it = 0; it < 400; ++it) {
    mid = 0.5 * (lo + hi);
    const double e = expected(mid) - spec.target_p_treated;
    if (std::abs(e) < 1e-10) break;
    if (e < 0.0) lo = mid;
    else hi = mid;
  }
  return mid;
}

struct GeneratedSample {
  Dataset dataset;
  std::vector<double> true_ite;
  double beta0;
};

/// Draws n rows: biomarkers, then treatment, then outcome, row by row from a
/// single data stream seeded by `seed`.
inline GeneratedSample generate(const ScenarioSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const double beta0 = solve_intercept(spec);
  const auto m = spec.n_markers();
  std::vector<int> partner(m, -1);
  std::vector<double> rho(m, 0.0);
  for (const auto& c : spec.corr_pairs) {
    partner[c.i] = static_cast<int>(c.j);
    partner[c.j] = static_cast<int>(c.i);
    rho[c.i] = rho[c.j] = c.rho;
  }
  auto rng = make_rng(seed, Stream::kData, 0);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  std::vector<double> y(n), ite(n);
  std::vector<int> treatment(n);
  std::vector<double> x(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t v = 0; v < m; ++v) {
      if (partner[v] < 0) {
        x[v] = bernoulli(rng, 0.5) ? 1.0 : 0.0;
      } else if (static_cast<std::size_t>(partner[v]) > v) {
        const auto c = correlated_binary_pair(rho[v]);
        const double u = uniform01(rng);
        const auto w = static_cast<std::size_t>(partner[v]);
        if (u < c.p00) x[v] = 0, x[w] = 0;
        else if (u < c.p00 + c.p01) x[v] = 0, x[w] = 1;
        else if (u < c.p00 + c.p01 + c.p10) x[v] = 1, x[w] = 0;
        else x[v] = 1, x[w] = 1;
      }
    }
    treatment[i] = bernoulli(rng, expit(beta0 + spec.eta(x.data()))) ? 1 : 0;
    y[i] = spec.mu(x.data(), treatment[i]) + spec.noise_sd * standard_normal(rng);
    ite[i] = spec.true_ite(x.data());
    for (std::size_t v = 0; v < m; ++v) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)) = x[v];
  }
  return {Dataset(std::move(y), std::move(treatment), std::move(X), spec.names()), std::move(ite), beta0};
}

inline GeneratedSample generate(const ScenarioSpec& spec, std::uint64_t seed) {
  return generate(spec, spec.n, seed);
}

/// Same outcome model with treatment assigned by a fair coin.
inline ScenarioSpec randomized(ScenarioSpec spec) {
  spec.treatment_terms.clear();
  spec.id += "-randomized";
  return spec;
}

namespace detail {

// X indices are 1-based in the tables.
inline std::size_t X(std::size_t k) { return k - 1; }

inline std::vector<MuTerm> table1_mu(double treat, double x9, double x10, double inter,
                                     std::size_t inter_var) {
  std::vector<MuTerm> mu = {{treat, {}, true},     {0.2, {X(4)}, false}, {0.3, {X(5)}, false},
                            {0.4, {X(6)}, false},  {0.5, {X(7)}, false}, {0.4, {X(8)}, false}};
  if (x9 != 0.0) mu.push_back({x9, {X(9)}, false});
  if (x10 != 0.0) mu.push_back({x10, {X(10)}, false});
  if (inter != 0.0) mu.push_back({inter, {X(inter_var)}, true});
  return mu;
}

inline std::vector<TreatmentTerm> table1_eta() {
  return {{std::log(1.25), X(1)}, {std::log(1.5), X(2)}, {std::log(1.75), X(3)}, {std::log(1.25), X(4)},
          {std::log(1.5), X(5)},  {std::log(1.75), X(6)}, {std::log(2.0), X(7)}};
}

}  // namespace detail

/// Every builtin scenario keyed by id.
inline std::map<std::string, ScenarioSpec> builtin_scenarios() {
  using detail::X;
  std::map<std::string, ScenarioSpec> out;
  auto id1 = [&](std::string id, std::string desc, std::vector<MuTerm> mu) {
    ScenarioSpec s;
    s.id = id;
    s.description = std::move(desc);
    s.treatment_terms = detail::table1_eta();
    s.mu_terms = std::move(mu);
    out[id] = s;
    return &out[id];
  };
  const auto mu = detail::table1_mu;
  {
    ScenarioSpec s;
    s.id = "0";
    s.description = "null scenario";
    s.treatment_terms = detail::table1_eta();
    out["0"] = s;
  }
  id1("A", "prognostic effects only", mu(0.5, 0.2, 0.3, 0.0, 10));
  id1("B.1", "X10 prognostic and qualitative predictive", mu(0.5, 0.2, 0.3, -1.0, 10));
  id1("B.2", "X10 prognostic and quantitative predictive", mu(0.5, 0.2, 0.3, 1.0, 10));
  id1("C.1", "X10 qualitative predictive only", mu(0.5, 0.2, 0.0, -1.0, 10));
  id1("C.2", "X10 quantitative predictive only", mu(0.5, 0.2, 0.0, 1.0, 10));
  id1("D.1", "X3 qualitative predictive", mu(0.5, 0.2, 0.3, -1.0, 3));
  id1("D.2", "X3 quantitative predictive", mu(0.5, 0.2, 0.3, 1.0, 3));
  id1("E.1", "X7 prognostic and qualitative predictive", mu(0.5, 0.2, 0.3, -1.0, 7));
  id1("E.2", "X7 prognostic and quantitative predictive", mu(0.5, 0.2, 0.3, 1.0, 7));
  id1("F.1", "smaller interaction, beta_int = -0.5", mu(0.25, 0.2, 0.3, -0.5, 10));
  id1("F.2", "smaller interaction, beta_int = -0.25", mu(0.25, 0.2, 0.3, -0.25, 10));
  id1("G.1", "B.1 with Corr(X7, X10) = 0.5", mu(0.5, 0.2, 0.3, -1.0, 10))->corr_pairs = {{X(7), X(10), 0.5}};
  id1("G.2", "B.1 with Corr(X7, X10) = -0.7", mu(0.5, 0.2, 0.3, -1.0, 10))->corr_pairs = {{X(7), X(10), -0.7}};
  {
    auto m = mu(0.5, 0.0, 0.0, -1.0, 10);
    m.push_back({-1.2, {X(9)}, true});
    id1("H.1", "X9 and X10 predictive only", m);
  }
  {
    auto m = mu(0.5, 0.6, 0.3, -1.0, 10);
    m.push_back({-1.0, {X(9)}, true});
    id1("H.2", "X9 and X10 equally predictive, X9 more prognostic", m);
  }
  {
    auto m = mu(0.5, 0.2, 0.0, 0.0, 10);
    m.push_back({-1.0, {X(9), X(10)}, true});
    id1("I", "three-way interaction of X9, X10 and treatment", m)->n = 2500;
  }
  id1("J", "C.1 plus 20 nuisance biomarkers", mu(0.5, 0.2, 0.0, -1.0, 10))->extra_nuisance = 20;

  auto id2 = [&](std::string id, std::string desc, std::vector<MuTerm> m, std::vector<TreatmentTerm> eta) {
    ScenarioSpec s;
    s.id = id;
    s.description = std::move(desc);
    s.family = ScenarioFamily::kAccuracy;
    s.p = 2;
    s.treatment_terms = std::move(eta);
    s.mu_terms = std::move(m);
    out[id] = s;
  };
  const double l15 = std::log(1.5);
  const std::vector<TreatmentTerm> eta2 = {{l15, X(2)}};
  const std::vector<TreatmentTerm> eta1 = {{l15, X(1)}};
  const std::vector<TreatmentTerm> eta12 = {{l15, X(1)}, {l15, X(2)}};
  id2("1", "X2 quantitative predictive, positive prognostic",
      {{0.5, {}, true}, {1.0, {X(2)}, false}, {2.0, {X(2)}, true}}, eta2);
  id2("2", "X2 quantitative predictive, not prognostic", {{0.5, {}, true}, {2.0, {X(2)}, true}}, eta2);
  id2("3", "X2 quantitative predictive, negative prognostic",
      {{0.5, {}, true}, {-2.0, {X(2)}, false}, {2.0, {X(2)}, true}}, eta2);
  id2("4", "X2 quantitative predictive, negative prognostic, X1 in propensity",
      {{0.5, {}, true}, {-2.0, {X(2)}, false}, {2.0, {X(2)}, true}}, eta12);
  id2("5", "X2 qualitative predictive, negative prognostic",
      {{0.5, {}, true}, {-1.0, {X(2)}, false}, {-2.0, {X(2)}, true}}, eta2);
  id2("6", "X2 qualitative predictive, positive prognostic",
      {{0.5, {}, true}, {1.0, {X(2)}, false}, {-2.0, {X(2)}, true}}, eta2);
  id2("7", "X2 qualitative predictive, X1 prognostic",
      {{0.5, {}, true}, {3.0, {X(1)}, false}, {-2.0, {X(2)}, true}}, eta1);
  id2("8", "X2 qualitative predictive, X1 prognostic, both in propensity",
      {{0.5, {}, true}, {3.0, {X(1)}, false}, {-2.0, {X(2)}, true}}, eta12);
  return out;
}

inline ScenarioSpec scenario(const std::string& id) {
  const auto all = builtin_scenarios();
  const auto it = all.find(id);
  if (it == all.end()) {
    std::string valid;
    for (const auto& [k, _] : all) valid += (valid.empty() ? "" : ", ") + k;
    throw UsageError("unknown scenario '" + id + "' (valid: " + valid + ")");
  }
  return it->second;
}

inline nlohmann::json to_json(const ScenarioSpec& s) {
  nlohmann::json eta = nlohmann::json::array();
  for (const auto& t : s.treatment_terms) eta.push_back({{"coef", t.coef}, {"var", s.names()[t.var]}});
  nlohmann::json mu = nlohmann::json::array();
  for (const auto& t : s.mu_terms) {
    std::vector<std::string> vars;
    for (auto v : t.vars) vars.push_back(s.names()[v]);
    mu.push_back({{"coef", t.coef}, {"vars", vars}, {"with_treatment", t.with_treatment}});
  }
  nlohmann::json corr = nlohmann::json::array();
  for (const auto& c : s.corr_pairs)
    corr.push_back({{"a", s.names()[c.i]}, {"b", s.names()[c.j]}, {"rho", c.rho}});
  return {{"id", s.id},
          {"description", s.description},
          {"family", s.family == ScenarioFamily::kAccuracy ? "accuracy" : "identification"},
          {"p", s.p},
          {"extra_nuisance", s.extra_nuisance},
          {"eta", eta},
          {"mu", mu},
          {"noise_sd", s.noise_sd},
          {"corr_pairs", corr},
          {"n", s.n},
          {"target_p_treated", s.target_p_treated}};
}

}  // namespace predmob
