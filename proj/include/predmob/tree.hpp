#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/glm.hpp"
#include "predmob/mfluct.hpp"
#include "predmob/random.hpp"

namespace predmob {

struct TreeConfig {
  double alpha = 0.05;
  double min_node_weight = 20.0;
  double min_arm_weight = 5.0;
  int max_depth = 10;
  std::size_t mtry = 0;  // 0 means all biomarkers
  std::uint64_t seed = 1;
  int bins = kDefaultBins;

  std::size_t effective_mtry(std::size_t p) const { return mtry == 0 ? p : mtry; }

  void validate(std::size_t p) const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
    if (!(min_node_weight > 0.0)) throw UsageError("min_node_weight must be positive");
    if (min_arm_weight < 0.0) throw UsageError("min_arm_weight must be non-negative");
    if (max_depth < 0) throw UsageError("max_depth must be >= 0");
    if (effective_mtry(p) < 1 || effective_mtry(p) > p) throw UsageError("mtry must lie in [1, p]");
    if (bins < 2) throw UsageError("bins must be >= 2");
  }
};

struct TreeNode {
  int id = 0;
  int depth = 0;
  bool terminal = true;
  int split_variable = -1;
  // Observations with x <= threshold go left.
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double b = 0.0;
  double objective = 0.0;
  double total_weight = 0.0;
  std::size_t n_obs = 0;
  double p_value = 1.0;
};

class PredMobTree {
 public:
  std::vector<TreeNode> nodes;
  std::vector<std::string> warnings;

  static PredMobTree root_leaf(double b, double total_weight = 0.0) {
    PredMobTree t;
    TreeNode leaf;
    leaf.b = b;
    leaf.total_weight = total_weight;
    t.nodes.push_back(leaf);
    return t;
  }

  // `value(j)` returns the j-th biomarker of the row being routed.
  template <typename Getter>
  int route_by(Getter&& value) const {
    int id = 0;
    while (!nodes[static_cast<std::size_t>(id)].terminal) {
      const auto& node = nodes[static_cast<std::size_t>(id)];
      id = value(static_cast<std::size_t>(node.split_variable)) <= node.threshold ? node.left
                                                                                 : node.right;
    }
    return id;
  }

  int route(std::span<const double> x) const {
    return route_by([&](std::size_t j) { return x[j]; });
  }

  double leaf_value(int id) const { return nodes[static_cast<std::size_t>(id)].b; }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (const auto& node : nodes)
      if (node.terminal) out.push_back(node.id);
    return out;
  }

  int max_terminal_depth() const {
    int d = 0;
    for (const auto& node : nodes)
      if (node.terminal) d = std::max(d, node.depth);
    return d;
  }

  // Depth of the shallowest node splitting on each used variable (root = 0).
  std::map<int, int> minimal_depth() const {
    std::map<int, int> out;
    for (const auto& node : nodes) {
      if (node.terminal) continue;
      auto it = out.find(node.split_variable);
      if (it == out.end())
        out.emplace(node.split_variable, node.depth);
      else
        it->second = std::min(it->second, node.depth);
    }
    return out;
  }

  bool operator==(const PredMobTree& other) const;
};

inline bool operator==(const TreeNode& a, const TreeNode& b) {
  return a.id == b.id && a.depth == b.depth && a.terminal == b.terminal &&
         a.split_variable == b.split_variable && a.threshold == b.threshold && a.left == b.left &&
         a.right == b.right && a.b == b.b && a.objective == b.objective &&
         a.total_weight == b.total_weight && a.n_obs == b.n_obs && a.p_value == b.p_value;
}

inline bool PredMobTree::operator==(const PredMobTree& other) const { return nodes == other.nodes; }

namespace detail {

struct ChildStats {
  double weight = 0.0, w_treated = 0.0, w_control = 0.0, sum_tr = 0.0, sum_rr = 0.0;

  void add(double w, double t_star, double r) {
    weight += w;
    (t_star > 0 ? w_treated : w_control) += w;
    sum_tr += w * t_star * r;
    sum_rr += w * r * r;
  }
  void add(const ChildStats& o) {
    weight += o.weight;
    w_treated += o.w_treated;
    w_control += o.w_control;
    sum_tr += o.sum_tr;
    sum_rr += o.sum_rr;
  }
  // Weighted RSS of the intercept-free effect-coded model fitted on this child.
  double objective() const { return weight > 0.0 ? sum_rr - sum_tr * sum_tr / weight : 0.0; }
  bool admissible(const TreeConfig& c) const {
    return weight >= c.min_node_weight && w_treated >= c.min_arm_weight &&
           w_control >= c.min_arm_weight && w_treated > 0.0 && w_control > 0.0;
  }
};

struct SplitCandidate {
  int variable = -1;
  double threshold = 0.0;
  double p_value = 1.0;
};

class Grower {
 public:
  Grower(const Dataset& data, std::span<const double> weights, std::span<const double> offset,
         const TreeConfig& config, Rng& rng)
      : d_(data), w_(weights), off_(offset), cfg_(config), rng_(rng) {}

  PredMobTree grow(std::vector<std::size_t> rows) {
    std::erase_if(rows, [&](std::size_t i) { return !(w_[i] > 0.0); });
    double wt = 0.0, wc = 0.0;
    for (auto i : rows) (d_.treatment()[i] == 1 ? wt : wc) += w_[i];
    if (!(wt > 0.0) || !(wc > 0.0))
      throw DegenerateNodeError("grow_tree: root node lacks one treatment arm");
    grow_node(rows, 0);
    return std::move(tree_);
  }

 private:
  double resid(std::size_t i) const { return d_.outcome()[i] - (off_.empty() ? 0.0 : off_[i]); }

  int grow_node(const std::vector<std::size_t>& rows, int depth) {
    ChildStats st;
    for (auto i : rows) st.add(w_[i], d_.t_star()[i], resid(i));
    TreeNode node;
    node.id = static_cast<int>(tree_.nodes.size());
    node.depth = depth;
    node.total_weight = st.weight;
    node.n_obs = rows.size();
    node.b = st.weight > 0.0 ? 2.0 * st.sum_tr / st.weight : 0.0;
    node.objective = st.objective();
    tree_.nodes.push_back(node);
    const auto self = static_cast<std::size_t>(node.id);

    if (depth >= cfg_.max_depth) return node.id;
    if (!(st.w_treated > 0.0) || !(st.w_control > 0.0)) return node.id;
    // A node fitted exactly leaves nothing to test.
    if (!(node.objective > 1e-20 * st.sum_rr)) return node.id;

    const auto best = select_split(rows, node.b);
    if (best.variable < 0 || !(best.p_value < cfg_.alpha)) return node.id;

    std::vector<std::size_t> left, right;
    const auto j = static_cast<std::size_t>(best.variable);
    for (auto i : rows) (d_.marker(i, j) <= best.threshold ? left : right).push_back(i);

    tree_.nodes[self].terminal = false;
    tree_.nodes[self].split_variable = best.variable;
    tree_.nodes[self].threshold = best.threshold;
    tree_.nodes[self].p_value = best.p_value;
    const int l = grow_node(left, depth + 1);
    const int r = grow_node(right, depth + 1);
    tree_.nodes[self].left = l;
    tree_.nodes[self].right = r;
    return node.id;
  }

  SplitCandidate select_split(const std::vector<std::size_t>& rows, double b) {
    const std::size_t p = d_.p();
    auto candidates = sample_without_replacement(p, cfg_.effective_mtry(p), rng_);

    const auto m = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd psi(m, 1);
    std::vector<double> w(rows.size()), x(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = rows[k];
      const double ts = d_.t_star()[i] / 2.0;
      psi(static_cast<Eigen::Index>(k), 0) = ts * (resid(i) - b * ts);
      w[k] = w_[i];
    }

    SplitCandidate best;
    for (auto j : candidates) {
      for (std::size_t k = 0; k < rows.size(); ++k) x[k] = d_.marker(rows[k], j);
      const bool binary = d_.is_binary(j);
      double threshold = 0.0;
      if (!admissible_threshold(rows, x, binary, threshold)) continue;
      const auto res = instability_test(psi, x, w,
                                        binary ? SplitKind::kBinary : SplitKind::kBinnedContinuous,
                                        {}, cfg_.bins);
      if (res.degenerate) continue;
      if (res.p_value < best.p_value ||
          (res.p_value == best.p_value && best.variable >= 0 && static_cast<int>(j) < best.variable)) {
        best.variable = static_cast<int>(j);
        best.threshold = threshold;
        best.p_value = res.p_value;
      }
    }
    return best;
  }

  // Finds the cut for this variable (0/1 for binary; the bin boundary with the
  // smallest summed child objective otherwise) among admissible cuts.
  bool admissible_threshold(const std::vector<std::size_t>& rows, const std::vector<double>& x,
                            bool binary, double& threshold) const {
    if (binary) {
      ChildStats lo, hi;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = rows[k];
        (x[k] <= 0.5 ? lo : hi).add(w_[i], d_.t_star()[i], resid(i));
      }
      threshold = 0.5;
      return lo.admissible(cfg_) && hi.admissible(cfg_);
    }
    std::vector<double> w(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) w[k] = w_[rows[k]];
    const auto breaks = bin_breaks(x, w, cfg_.bins);
    if (breaks.empty()) return false;
    const auto levels = bin_levels(x, breaks);
    std::vector<ChildStats> per_bin(breaks.size() + 1);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = rows[k];
      per_bin[static_cast<std::size_t>(levels[k])].add(w_[i], d_.t_star()[i], resid(i));
    }
    ChildStats total;
    for (const auto& s : per_bin) total.add(s);
    ChildStats left;
    double best_obj = std::numeric_limits<double>::infinity();
    bool found = false;
    for (std::size_t c = 0; c < breaks.size(); ++c) {
      left.add(per_bin[c]);
      ChildStats right = total;
      right.weight -= left.weight;
      right.w_treated -= left.w_treated;
      right.w_control -= left.w_control;
      right.sum_tr -= left.sum_tr;
      right.sum_rr -= left.sum_rr;
      if (!left.admissible(cfg_) || !right.admissible(cfg_)) continue;
      const double obj = left.objective() + right.objective();
      if (obj < best_obj) {
        best_obj = obj;
        threshold = breaks[c];
        found = true;
      }
    }
    return found;
  }

  const Dataset& d_;
  std::span<const double> w_;
  std::span<const double> off_;
  const TreeConfig& cfg_;
  Rng& rng_;
  PredMobTree tree_;
};

}  // namespace detail

/// Grows one predMOB tree on `rows` of `data`. `weights` and `offset` are
/// indexed by dataset row; an empty offset means zero.
inline PredMobTree grow_tree(const Dataset& data, std::vector<std::size_t> rows,
                             std::span<const double> weights, std::span<const double> offset,
                             const TreeConfig& config, Rng& rng) {
  config.validate(data.p());
  if (weights.size() != data.n()) throw UsageError("grow_tree: weights length differs from n");
  if (!offset.empty() && offset.size() != data.n())
    throw UsageError("grow_tree: offset length differs from n");
  detail::Grower g(data, weights, offset, config, rng);
  return g.grow(std::move(rows));
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

inline PredMobTree grow_tree(const Dataset& data, const CaseWeights& weights,
                             std::span<const double> offset, const TreeConfig& config, Rng& rng) {
  return grow_tree(data, all_rows(data.n()), weights.w, offset, config, rng);
}

// ---------------------------------------------------------------------------
// Trees with global covariate effects

struct PalmFit {
  Eigen::VectorXd gamma;                    // intercept first, then global covariates
  std::vector<std::size_t> global_columns;  // biomarker indices matching gamma[1..]
  PredMobTree tree;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;

  double offset(const Dataset& d, std::size_t i) const {
    double o = gamma.size() > 0 ? gamma(0) : 0.0;
    for (std::size_t k = 0; k < global_columns.size(); ++k)
      o += gamma(static_cast<Eigen::Index>(k + 1)) * d.marker(i, global_columns[k]);
    return o;
  }
};

struct PalmOptions {
  int max_alternations = 100;
  double tol = 1e-6;
};

namespace detail {

inline Eigen::MatrixXd global_design(const Dataset& d, const std::vector<std::size_t>& rows,
                                     const std::vector<std::size_t>& cols) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(cols.size() + 1));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x(static_cast<Eigen::Index>(r), 0) = 1.0;
    for (std::size_t k = 0; k < cols.size(); ++k)
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k + 1)) = d.marker(rows[r], cols[k]);
  }
  return x;
}

template <typename T>
std::vector<T> gather(std::span<const T> v, const std::vector<std::size_t>& rows) {
  std::vector<T> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = v[rows[r]];
  return out;
}

}  // namespace detail

/// Alternates tree growth on the offset x_F' gamma with a joint weighted
/// least-squares refit of gamma and all leaf coefficients.
inline PalmFit fit_palm(const Dataset& data, std::vector<std::size_t> rows,
                        std::vector<std::size_t> global_columns, std::span<const double> weights,
                        const TreeConfig& config, Rng& rng, PalmOptions opt = {}) {
  config.validate(data.p());
  std::erase_if(rows, [&](std::size_t i) { return !(weights[i] > 0.0); });
  const auto y = detail::gather(data.outcome(), rows);
  const auto w = detail::gather(weights, rows);
  PalmFit fit;

  if (global_columns.empty()) {
    double sy = 0.0, sw = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      sy += w[r] * y[r];
      sw += w[r];
    }
    fit.gamma = Eigen::VectorXd::Constant(1, sw > 0.0 ? sy / sw : 0.0);
    fit.tree = grow_tree(data, rows, weights, {}, config, rng);
    fit.converged = true;
    return fit;
  }

  // Initial gamma from x_F alone; dependent global columns are dropped.
  Eigen::VectorXd gamma;
  for (;;) {
    try {
      gamma = fit_wls(detail::global_design(data, rows, global_columns), y, w).coef;
      break;
    } catch (const SingularDesignError& e) {
      std::vector<std::size_t> keep;
      for (std::size_t k = 0; k < global_columns.size(); ++k) {
        const bool bad = std::find(e.columns().begin(), e.columns().end(), k + 1) != e.columns().end();
        if (bad)
          fit.warnings.push_back("dropped global covariate '" + data.names()[global_columns[k]] +
                                 "' (collinear)");
        else
          keep.push_back(global_columns[k]);
      }
      if (keep.size() == global_columns.size()) throw;
      global_columns = std::move(keep);
    }
  }
  fit.global_columns = global_columns;

  const Rng start = rng;
  std::vector<double> offset(data.n(), 0.0);
  for (int it = 1; it <= opt.max_alternations; ++it) {
    fit.iterations = it;
    fit.gamma = gamma;
    for (auto i : rows) offset[i] = fit.offset(data, i);
    Rng tree_rng = start;
    fit.tree = grow_tree(data, rows, weights, offset, config, tree_rng);
    rng = tree_rng;

    const auto leaves = fit.tree.leaves();
    std::map<int, Eigen::Index> leaf_col;
    const auto g = static_cast<Eigen::Index>(global_columns.size() + 1);
    for (std::size_t k = 0; k < leaves.size(); ++k)
      leaf_col[leaves[k]] = g + static_cast<Eigen::Index>(k);
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()),
                                              g + static_cast<Eigen::Index>(leaves.size()));
    x.leftCols(g) = detail::global_design(data, rows, global_columns);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto i = rows[r];
      const int leaf = fit.tree.route_by([&](std::size_t j) { return data.marker(i, j); });
      x(static_cast<Eigen::Index>(r), leaf_col[leaf]) = data.t_star()[i] / 2.0;
    }
    const auto joint = fit_wls(x, y, w);
    Eigen::VectorXd next = joint.coef.head(g);
    for (const auto& [leaf, col] : leaf_col)
      fit.tree.nodes[static_cast<std::size_t>(leaf)].b = joint.coef(col);
    const double change = (next - gamma).cwiseAbs().maxCoeff();
    gamma = next;
    fit.gamma = gamma;
    if (change < opt.tol) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged)
    fit.warnings.push_back("palm: no convergence after " + std::to_string(opt.max_alternations) +
                           " alternations");
  return fit;
}

inline PalmFit fit_palm(const Dataset& data, std::vector<std::size_t> global_columns,
                        const CaseWeights& weights, const TreeConfig& config, Rng& rng,
                        PalmOptions opt = {}) {
  return fit_palm(data, all_rows(data.n()), std::move(global_columns), weights.w, config, rng, opt);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const PredMobTree& tree) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    nlohmann::json j = {{"id", n.id},
                        {"depth", n.depth},
                        {"terminal", n.terminal},
                        {"b", n.b},
                        {"objective", n.objective},
                        {"total_weight", n.total_weight},
                        {"n_obs", n.n_obs}};
    if (!n.terminal) {
      j["split_variable"] = n.split_variable;
      j["threshold"] = n.threshold;
      j["left"] = n.left;
      j["right"] = n.right;
      j["p_value"] = n.p_value;
    }
    nodes.push_back(std::move(j));
  }
  nlohmann::json out = {{"nodes", nodes}};
  if (!tree.warnings.empty()) out["warnings"] = tree.warnings;
  return out;
}

inline PredMobTree tree_from_json(const nlohmann::json& j) {
  PredMobTree tree;
  for (const auto& jn : j.at("nodes")) {
    TreeNode n;
    n.id = jn.at("id").get<int>();
    n.depth = jn.at("depth").get<int>();
    n.terminal = jn.at("terminal").get<bool>();
    n.b = jn.at("b").get<double>();
    n.objective = jn.at("objective").get<double>();
    n.total_weight = jn.at("total_weight").get<double>();
    n.n_obs = jn.at("n_obs").get<std::size_t>();
    if (!n.terminal) {
      n.split_variable = jn.at("split_variable").get<int>();
      n.threshold = jn.at("threshold").get<double>();
      n.left = jn.at("left").get<int>();
      n.right = jn.at("right").get<int>();
      n.p_value = jn.at("p_value").get<double>();
    }
    tree.nodes.push_back(n);
  }
  if (j.contains("warnings")) tree.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
    const auto& n = tree.nodes[k];
    if (n.id != static_cast<int>(k)) throw DataError("tree JSON: node ids must be 0..N-1 in order");
    if (!n.terminal && (n.left <= n.id || n.right <= n.id ||
                        n.left >= static_cast<int>(tree.nodes.size()) ||
                        n.right >= static_cast<int>(tree.nodes.size())))
      throw DataError("tree JSON: invalid child reference at node " + std::to_string(n.id));
  }
  return tree;
}

}  // namespace predmob
