#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "predmob/errors.hpp"
#include "predmob/numeric.hpp"

namespace predmob {

enum class SplitKind { kBinary, kCategorical, kBinnedContinuous };

struct InstabilityResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int df = 1;
  std::string variable;
  bool degenerate = false;
  int levels = 0;
};

inline constexpr int kDefaultBins = 10;

/// Interior cut points for a continuous variable: weighted quantiles at
/// 1/k, ..., (k-1)/k, deduplicated, excluding the maximum observed value.
inline std::vector<double> bin_breaks(std::span<const double> x, std::span<const double> w,
                                      int bins = kDefaultBins) {
  std::vector<double> xs, ws;
  double xmax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (w[i] > 0.0) {
      xs.push_back(x[i]);
      ws.push_back(w[i]);
      xmax = std::max(xmax, x[i]);
    }
  }
  std::vector<double> breaks;
  if (xs.empty()) return breaks;
  for (int k = 1; k < bins; ++k) {
    const double b = weighted_quantile(xs, ws, static_cast<double>(k) / bins);
    if (b < xmax && (breaks.empty() || b > breaks.back())) breaks.push_back(b);
  }
  return breaks;
}

// Level index per observation; bins are (b[k-1], b[k]].
inline std::vector<int> bin_levels(std::span<const double> x, const std::vector<double>& breaks) {
  std::vector<int> lv(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    lv[i] = static_cast<int>(std::lower_bound(breaks.begin(), breaks.end(), x[i]) - breaks.begin());
  return lv;
}

inline std::vector<int> split_levels(std::span<const double> x, std::span<const double> w,
                                     SplitKind kind, int bins = kDefaultBins) {
  switch (kind) {
    case SplitKind::kBinary: {
      std::vector<int> lv(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) lv[i] = x[i] > 0.5 ? 1 : 0;
      return lv;
    }
    case SplitKind::kCategorical: {
      std::map<double, int> codes;
      for (double v : x) codes.emplace(v, 0);
      int next = 0;
      for (auto& [v, c] : codes) c = next++;
      std::vector<int> lv(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) lv[i] = codes[x[i]];
      return lv;
    }
    case SplitKind::kBinnedContinuous:
      return bin_levels(x, bin_breaks(x, w, bins));
  }
  return {};
}

/// Score-based instability test with the categorical chi-squared functional.
///
/// `scores` holds the unweighted estimating-function contribution of each
/// observation (one column per tested parameter); `weights` are treated as
/// case weights and normalised to mean one over the positive entries, so the
/// statistic does not depend on their overall scale. The decorrelated
/// per-level sums S_l give
///     stat = sum_l |S_l|^2 / W_l,   df = (k - 1) q,
/// with W_l the (normalised) weight in level l.
inline InstabilityResult instability_test(const Eigen::Ref<const Eigen::MatrixXd>& scores,
                                          std::span<const double> split_var,
                                          std::span<const double> weights, SplitKind kind,
                                          std::string variable = {}, int bins = kDefaultBins) {
  const auto n = scores.rows();
  const auto q = scores.cols();
  if (static_cast<std::size_t>(n) != split_var.size() || split_var.size() != weights.size())
    throw UsageError("instability_test: inputs differ in length");

  InstabilityResult res;
  res.variable = std::move(variable);
  res.df = static_cast<int>(q);

  double wsum = 0.0;
  std::size_t npos = 0;
  for (double w : weights) {
    if (w > 0.0) {
      wsum += w;
      ++npos;
    }
  }
  if (npos == 0) {
    res.degenerate = true;
    return res;
  }
  const double scale = static_cast<double>(npos) / wsum;

  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)] * scale;
    if (w > 0.0) j.noalias() += w * scores.row(i).transpose() * scores.row(i);
  }
  j /= static_cast<double>(npos);
  const double tr = j.trace();
  if (!(tr > 0.0) || !std::isfinite(tr)) {
    res.degenerate = true;
    return res;
  }
  j.diagonal().array() += 1e-10 * tr / static_cast<double>(q);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(j);
  const Eigen::MatrixXd j_inv_sqrt = eig.operatorInverseSqrt();

  const auto levels = split_levels(split_var, weights, kind, bins);
  const int k_max = levels.empty() ? 0 : *std::max_element(levels.begin(), levels.end()) + 1;
  Eigen::MatrixXd level_sum = Eigen::MatrixXd::Zero(k_max, q);
  std::vector<double> level_weight(static_cast<std::size_t>(k_max), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)] * scale;
    if (!(w > 0.0)) continue;
    const int l = levels[static_cast<std::size_t>(i)];
    level_sum.row(l) += w * scores.row(i);
    level_weight[static_cast<std::size_t>(l)] += w;
  }

  double stat = 0.0;
  int k = 0;
  for (int l = 0; l < k_max; ++l) {
    const double wl = level_weight[static_cast<std::size_t>(l)];
    if (!(wl > 0.0)) continue;
    ++k;
    const Eigen::VectorXd s = j_inv_sqrt * level_sum.row(l).transpose();
    stat += s.squaredNorm() / wl;
  }
  res.levels = k;
  if (k < 2) {
    res.degenerate = true;
    return res;
  }
  res.statistic = stat;
  res.df = (k - 1) * static_cast<int>(q);
  res.p_value = chi2_upper_tail(stat, res.df);
  return res;
}

}  // namespace predmob
