#include <cmath>
#include <functional>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "predmob/glm.hpp"
#include "predmob/random.hpp"
#include "predmob/scenarios.hpp"
#include "predmob/tree.hpp"

using namespace predmob;

namespace {

std::vector<std::size_t> members(const PredMobTree& tree, const Dataset& d, int node_id) {
  // Rows routed through node_id.
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.n(); ++i) {
    int id = 0;
    for (;;) {
      if (id == node_id) {
        out.push_back(i);
        break;
      }
      const auto& nd = tree.nodes[static_cast<std::size_t>(id)];
      if (nd.terminal) break;
      id = d.marker(i, static_cast<std::size_t>(nd.split_variable)) <= nd.threshold ? nd.left : nd.right;
    }
  }
  return out;
}

Dataset linear_palm_data(std::size_t n, std::uint64_t seed) {
  auto rng = make_rng(seed, Stream::kData, 0);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 10);
  std::vector<double> y(n);
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 10; ++j) x(static_cast<Eigen::Index>(i), j) = bernoulli(rng, 0.5) ? 1 : 0;
    t[i] = bernoulli(rng, 0.5) ? 1 : 0;
    const double ts = 2.0 * t[i] - 1.0;
    y[i] = 0.3 * x(static_cast<Eigen::Index>(i), 4) + 1.0 * x(static_cast<Eigen::Index>(i), 9) * ts +
           0.5 * standard_normal(rng);
  }
  return Dataset(y, t, x, scenario("0").names());
}

}  // namespace

TEST(Tree, StructuralInvariants) {
  const auto sample = generate(randomized(scenario("H.2")), 2000, 4);
  const auto& d = sample.dataset;
  TreeConfig cfg;
  auto rng = make_rng(1, Stream::kTree, 0);
  const auto tree = grow_tree(d, CaseWeights::ones(d.n()), {}, cfg, rng);
  ASSERT_GT(tree.nodes.size(), 1u);
  for (const auto& nd : tree.nodes) {
    const auto rows = members(tree, d, nd.id);
    EXPECT_NEAR(nd.total_weight, static_cast<double>(rows.size()), 1e-9);
    if (nd.terminal) {
      std::vector<double> y, t, w;
      double arm[2] = {0, 0};
      for (auto i : rows) {
        y.push_back(d.outcome()[i]);
        t.push_back(d.t_star()[i]);
        w.push_back(1.0);
        arm[d.treatment()[i]] += 1.0;
      }
      EXPECT_NEAR(fit_predmob_base(y, t, w).coef(0), nd.b, 1e-10);
      EXPECT_GE(nd.total_weight, cfg.min_node_weight);
      EXPECT_GE(std::min(arm[0], arm[1]), cfg.min_arm_weight);
    } else {
      const auto& l = tree.nodes[static_cast<std::size_t>(nd.left)];
      const auto& r = tree.nodes[static_cast<std::size_t>(nd.right)];
      EXPECT_NEAR(l.total_weight + r.total_weight, nd.total_weight, 1e-9);
      EXPECT_EQ(l.depth, nd.depth + 1);
      EXPECT_EQ(r.depth, nd.depth + 1);
      EXPECT_LT(nd.p_value, cfg.alpha);
    }
  }
}

TEST(Tree, DeterministicForSeed) {
  const auto sample = generate(scenario("C.1"), 1000, 8);
  TreeConfig cfg;
  cfg.mtry = 3;
  auto r1 = make_rng(5, Stream::kTree, 0), r2 = make_rng(5, Stream::kTree, 0);
  const auto a = grow_tree(sample.dataset, CaseWeights::ones(1000), {}, cfg, r1);
  const auto b = grow_tree(sample.dataset, CaseWeights::ones(1000), {}, cfg, r2);
  EXPECT_TRUE(a == b);
}

TEST(Tree, WeightScaleInvariance) {
  const auto sample = generate(randomized(scenario("B.1")), 1500, 9);
  const auto& d = sample.dataset;
  auto rng = make_rng(3, Stream::kData, 1);
  CaseWeights w1, w3;
  for (std::size_t i = 0; i < d.n(); ++i) {
    w1.w.push_back(0.5 + uniform01(rng));
    w3.w.push_back(3.0 * w1.w.back());
  }
  TreeConfig c1, c3;
  c3.min_node_weight *= 3.0;
  c3.min_arm_weight *= 3.0;
  auto ra = make_rng(2, Stream::kTree, 0), rb = make_rng(2, Stream::kTree, 0);
  const auto a = grow_tree(d, w1, {}, c1, ra);
  const auto b = grow_tree(d, w3, {}, c3, rb);
  ASSERT_EQ(a.nodes.size(), b.nodes.size());
  for (std::size_t k = 0; k < a.nodes.size(); ++k) {
    EXPECT_EQ(a.nodes[k].split_variable, b.nodes[k].split_variable);
    EXPECT_EQ(a.nodes[k].threshold, b.nodes[k].threshold);
    EXPECT_NEAR(a.nodes[k].b, b.nodes[k].b, 1e-10);
  }
}

TEST(Tree, NullDataRarelySplits) {
  // With 10 candidates at alpha = 0.05 the chance of any root split is about
  // 1 - 0.95^10 = 0.401; the bound allows three Monte Carlo standard errors.
  const auto spec = scenario("0");
  int split = 0;
  const int reps = 500;
  for (int rep = 0; rep < reps; ++rep) {
    const auto sample = generate(spec, 1000, 5000 + static_cast<std::uint64_t>(rep));
    auto rng = make_rng(static_cast<std::uint64_t>(rep), Stream::kTree, 0);
    const auto tree = grow_tree(sample.dataset, CaseWeights::ones(1000), {}, TreeConfig{}, rng);
    split += tree.nodes.size() > 1 ? 1 : 0;
  }
  const double frac = split / static_cast<double>(reps);
  EXPECT_LE(frac, 0.40 + 3.0 * std::sqrt(0.4 * 0.6 / reps));
  EXPECT_GE(frac, 0.40 - 3.0 * std::sqrt(0.4 * 0.6 / reps));
}

TEST(Tree, PredictiveMarkerIsChosenAtRoot) {
  const auto spec = randomized(scenario("C.1"));
  int hits = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto sample = generate(spec, 1000, 9000 + static_cast<std::uint64_t>(rep));
    auto rng = make_rng(static_cast<std::uint64_t>(rep), Stream::kTree, 0);
    const auto tree = grow_tree(sample.dataset, CaseWeights::ones(1000), {}, TreeConfig{}, rng);
    hits += (!tree.nodes[0].terminal && tree.nodes[0].split_variable == 9) ? 1 : 0;
  }
  EXPECT_GE(hits, 190);
}

TEST(Tree, ContinuousSplitAtBinBoundary) {
  auto rng = make_rng(40, Stream::kData, 0);
  const std::size_t n = 2000;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 1);
  std::vector<double> y(n);
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = uniform01(rng);
    x(static_cast<Eigen::Index>(i), 0) = v;
    t[i] = bernoulli(rng, 0.5) ? 1 : 0;
    y[i] = (v > 0.6 ? 2.0 : -1.0) * (2.0 * t[i] - 1.0) / 2.0 + 0.3 * standard_normal(rng);
  }
  const Dataset d(y, t, x, {"v"});
  auto trng = make_rng(1, Stream::kTree, 0);
  const auto tree = grow_tree(d, CaseWeights::ones(n), {}, TreeConfig{}, trng);
  ASSERT_FALSE(tree.nodes[0].terminal);
  EXPECT_NEAR(tree.nodes[0].threshold, 0.6, 0.06);
}

TEST(Tree, RouteAndLeafValues) {
  const auto sample = generate(randomized(scenario("C.1")), 1000, 3);
  auto rng = make_rng(1, Stream::kTree, 0);
  const auto tree = grow_tree(sample.dataset, CaseWeights::ones(1000), {}, TreeConfig{}, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    const auto row = sample.dataset.row(i);
    const int leaf = tree.route(row);
    EXPECT_TRUE(tree.nodes[static_cast<std::size_t>(leaf)].terminal);
  }
}

TEST(Tree, JsonRoundTrip) {
  const auto sample = generate(randomized(scenario("H.1")), 1500, 3);
  auto rng = make_rng(1, Stream::kTree, 0);
  const auto tree = grow_tree(sample.dataset, CaseWeights::ones(1500), {}, TreeConfig{}, rng);
  const auto back = tree_from_json(to_json(tree));
  EXPECT_TRUE(back == tree);
  auto broken = to_json(tree);
  broken["nodes"][0]["left"] = 999;
  if (!tree.nodes[0].terminal) EXPECT_THROW(tree_from_json(broken), DataError);
}

TEST(Tree, DegenerateRootThrows) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(40, 1);
  std::vector<double> y(40, 1.0);
  std::vector<int> t(40, 0);
  t[0] = 1;
  const Dataset d(y, t, x, {"a"});
  std::vector<double> w(40, 1.0);
  w[0] = 0.0;
  auto rng = make_rng(1, Stream::kTree, 0);
  EXPECT_THROW(grow_tree(d, all_rows(40), w, {}, TreeConfig{}, rng), DegenerateNodeError);
}

TEST(Tree, ConfigValidation) {
  TreeConfig c;
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(10), UsageError);
  TreeConfig m;
  m.mtry = 11;
  EXPECT_THROW(m.validate(10), UsageError);
}

TEST(Palm, EmptyGlobalCovariatesReduceToPlainTree) {
  const auto sample = generate(scenario("C.1"), 1000, 12);
  const auto& d = sample.dataset;
  auto r1 = make_rng(4, Stream::kTree, 0), r2 = make_rng(4, Stream::kTree, 0);
  const auto palm = fit_palm(d, {}, CaseWeights::ones(d.n()), TreeConfig{}, r1);
  const auto plain = grow_tree(d, CaseWeights::ones(d.n()), {}, TreeConfig{}, r2);
  EXPECT_TRUE(palm.tree == plain);
  ASSERT_EQ(palm.gamma.size(), 1);
  double my = 0;
  for (double v : d.outcome()) my += v / static_cast<double>(d.n());
  EXPECT_NEAR(palm.gamma(0), my, 1e-12);
}

TEST(Palm, RecoversGlobalCoefficient) {
  const auto d = linear_palm_data(5000, 31);
  std::vector<std::size_t> cols(10);
  std::iota(cols.begin(), cols.end(), 0);
  auto rng = make_rng(4, Stream::kTree, 0);
  const auto palm = fit_palm(d, cols, CaseWeights::ones(d.n()), TreeConfig{}, rng);
  EXPECT_TRUE(palm.converged);
  EXPECT_NEAR(palm.gamma(5), 0.3, 0.05);  // column X5 follows the intercept
  EXPECT_EQ(palm.tree.nodes[0].split_variable, 9);
}

TEST(Palm, JointRefitSatisfiesNormalEquations) {
  const auto sample = generate(scenario("B.1"), 1000, 14);
  const auto& d = sample.dataset;
  std::vector<std::size_t> cols(10);
  std::iota(cols.begin(), cols.end(), 0);
  auto rng = make_rng(4, Stream::kTree, 0);
  const auto palm = fit_palm(d, cols, CaseWeights::ones(d.n()), TreeConfig{}, rng);
  Eigen::VectorXd grad_global = Eigen::VectorXd::Zero(palm.gamma.size());
  std::map<int, double> grad_leaf;
  for (std::size_t i = 0; i < d.n(); ++i) {
    const int leaf = palm.tree.route_by([&](std::size_t j) { return d.marker(i, j); });
    const double r = d.outcome()[i] - palm.offset(d, i) - palm.tree.leaf_value(leaf) * d.t_star()[i] / 2.0;
    grad_global(0) += r;
    for (std::size_t k = 0; k < palm.global_columns.size(); ++k)
      grad_global(static_cast<Eigen::Index>(k + 1)) += r * d.marker(i, palm.global_columns[k]);
    grad_leaf[leaf] += r * d.t_star()[i] / 2.0;
  }
  EXPECT_LT(grad_global.cwiseAbs().maxCoeff(), 1e-8);
  for (const auto& [leaf, g] : grad_leaf) EXPECT_LT(std::abs(g), 1e-8);
}

TEST(Palm, CollinearGlobalColumnIsDropped) {
  auto sample = generate(scenario("C.1"), 800, 15);
  const auto& src = sample.dataset;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(src.n()), 11);
  x.leftCols(10) = src.biomarkers();
  x.col(10) = src.biomarkers().col(0);
  auto names = src.names();
  names.push_back("X1copy");
  const Dataset d(std::vector<double>(src.outcome().begin(), src.outcome().end()),
                  std::vector<int>(src.treatment().begin(), src.treatment().end()), x, names);
  std::vector<std::size_t> cols(11);
  std::iota(cols.begin(), cols.end(), 0);
  auto rng = make_rng(4, Stream::kTree, 0);
  const auto palm = fit_palm(d, cols, CaseWeights::ones(d.n()), TreeConfig{}, rng);
  EXPECT_EQ(palm.global_columns.size(), 10u);
  EXPECT_FALSE(palm.warnings.empty());
}
