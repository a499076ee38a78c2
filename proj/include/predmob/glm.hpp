#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "predmob/dataset.hpp"
#include "predmob/errors.hpp"
#include "predmob/numeric.hpp"

namespace predmob {

struct LinearFit {
  Eigen::VectorXd coef;
  // Row i holds w_i * x_i * residual_i.
  Eigen::MatrixXd scores;
  double objective = 0.0;
  double sigma2 = 0.0;
};

struct LogisticFit {
  Eigen::VectorXd coef;
  std::vector<double> fitted;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> warnings;
};

/// Weighted least squares via column-pivoted Householder QR on the
/// sqrt-weighted design. Zero-weight rows are dropped before the rank check.
inline LinearFit fit_wls(const Eigen::MatrixXd& design, std::span<const double> response,
                         std::span<const double> weights) {
  const auto n = design.rows();
  const auto q = design.cols();
  if (q < 1) throw UsageError("fit_wls: design needs at least one column");
  if (static_cast<std::size_t>(n) != response.size() || response.size() != weights.size())
    throw UsageError("fit_wls: design, response and weights differ in length");

  std::vector<Eigen::Index> active;
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w < 0.0) throw DataError("fit_wls: negative weight");
    if (w > 0.0) active.push_back(i);
    wsum += w;
  }
  if (active.empty()) throw DataError("fit_wls: all weights are zero");

  const auto m = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd a(m, q);
  Eigen::VectorXd b(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double sw = std::sqrt(weights[static_cast<std::size_t>(active[r])]);
    a.row(r) = sw * design.row(active[r]);
    b(r) = sw * response[static_cast<std::size_t>(active[r])];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  qr.compute(a);
  if (qr.rank() < q) {
    std::vector<std::size_t> bad;
    std::string names;
    for (Eigen::Index k = qr.rank(); k < q; ++k) {
      const auto col = static_cast<std::size_t>(qr.colsPermutation().indices()(k));
      bad.push_back(col);
      names += (names.empty() ? "" : ", ") + std::to_string(col);
    }
    throw SingularDesignError("fit_wls: singular design, dependent column(s): " + names,
                              std::move(bad));
  }

  LinearFit fit;
  fit.coef = qr.solve(b);
  fit.scores = Eigen::MatrixXd::Zero(n, q);
  double rss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const double r = response[static_cast<std::size_t>(i)] - design.row(i).dot(fit.coef);
    fit.scores.row(i) = w * r * design.row(i);
    rss += w * r * r;
  }
  fit.objective = rss;
  fit.sigma2 = wsum > static_cast<double>(q) ? rss / (wsum - static_cast<double>(q)) : 0.0;
  return fit;
}

/// Intercept-free model on the effect-coded treatment:
/// (y - offset) ~ b * t_star / 2, closed form b = 2 * sum(w t* r) / sum(w).
inline LinearFit fit_predmob_base(std::span<const double> outcome, std::span<const double> t_star,
                                  std::span<const double> weights,
                                  std::span<const double> offset = {}) {
  const std::size_t n = outcome.size();
  if (t_star.size() != n || weights.size() != n || (!offset.empty() && offset.size() != n))
    throw UsageError("fit_predmob_base: inputs differ in length");
  double w_treated = 0.0, w_control = 0.0, num = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = outcome[i] - (offset.empty() ? 0.0 : offset[i]);
    (t_star[i] > 0 ? w_treated : w_control) += weights[i];
    num += weights[i] * t_star[i] * r;
  }
  if (!(w_treated > 0.0) || !(w_control > 0.0))
    throw DegenerateNodeError("fit_predmob_base: one treatment arm has zero total weight");
  const double wsum = w_treated + w_control;
  const double b = 2.0 * num / wsum;

  LinearFit fit;
  fit.coef = Eigen::VectorXd::Constant(1, b);
  fit.scores = Eigen::MatrixXd(static_cast<Eigen::Index>(n), 1);
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = t_star[i] / 2.0;
    const double r = outcome[i] - (offset.empty() ? 0.0 : offset[i]) - b * x;
    fit.scores(static_cast<Eigen::Index>(i), 0) = weights[i] * x * r;
    rss += weights[i] * r * r;
  }
  fit.objective = rss;
  fit.sigma2 = wsum > 1.0 ? rss / (wsum - 1.0) : 0.0;
  return fit;
}

struct LogisticOptions {
  int max_iter = 50;
  double tol = 1e-8;
  double clip = 1e-6;
  double separation_bound = 30.0;
};

/// Weighted logistic regression by iteratively reweighted least squares.
/// Non-convergence and separation are reported through `converged` and
/// `warnings`; they are not errors.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& design, std::span<const double> response,
                                std::span<const double> weights, LogisticOptions opt = {}) {
  const auto n = design.rows();
  const auto q = design.cols();
  if (static_cast<std::size_t>(n) != response.size() || response.size() != weights.size())
    throw UsageError("fit_logistic: design, response and weights differ in length");
  double w1 = 0.0, w0 = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (response[i] != 0.0 && response[i] != 1.0)
      throw DataError("fit_logistic: response must be 0/1");
    (response[i] == 1.0 ? w1 : w0) += weights[i];
  }
  if (!(w1 > 0.0) || !(w0 > 0.0))
    throw DataError("fit_logistic: response needs both classes with positive weight");

  LogisticFit fit;
  fit.coef = Eigen::VectorXd::Zero(q);
  std::vector<double> work_w(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n));
  for (int it = 1; it <= opt.max_iter; ++it) {
    fit.iterations = it;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double eta = design.row(i).dot(fit.coef);
      const double mu = std::clamp(expit(eta), 1e-12, 1.0 - 1e-12);
      const double v = mu * (1.0 - mu);
      work_w[k] = weights[k] * v;
      z[k] = eta + (response[k] - mu) / v;
    }
    Eigen::VectorXd next;
    try {
      next = fit_wls(design, z, work_w).coef;
    } catch (const SingularDesignError& e) {
      fit.warnings.push_back(std::string("logistic: ") + e.what());
      break;
    }
    const double change = (next - fit.coef).cwiseAbs().maxCoeff();
    fit.coef = next;
    if (fit.coef.cwiseAbs().maxCoeff() > opt.separation_bound) {
      fit.warnings.push_back("logistic: coefficients diverging (|coef| > " +
                             std::to_string(opt.separation_bound) + "), likely separation");
      break;
    }
    if (change < opt.tol) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged && fit.warnings.empty())
    fit.warnings.push_back("logistic: no convergence after " + std::to_string(opt.max_iter) +
                           " iterations");
  fit.fitted.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    fit.fitted[static_cast<std::size_t>(i)] =
        std::clamp(expit(design.row(i).dot(fit.coef)), opt.clip, 1.0 - opt.clip);
  return fit;
}

}  // namespace predmob
