#pragma once

// Classical reference estimators: pooled OLS and feasible GLS for the
// random-effects panel model, with Swamy-Arora style one-way ANOVA variance
// components. Also the estimator descriptor used by the simulation harness.

#include "mdpde/errors.hpp"
#include "mdpde/panel.hpp"

#include <optional>
#include <string>

namespace mdpde {

namespace detail {

inline VectorXd pooled_ols_beta(const PanelDataset& data) {
  const int n = data.n_units, t = data.n_periods, k = data.n_regressors;
  MatrixXd x_pool(n * t, k);
  VectorXd y_pool(n * t);
  for (int i = 0; i < n; ++i) {
    x_pool.middleRows(i * t, t) = data.x[i];
    y_pool.segment(i * t, t) = data.y.row(i).transpose();
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(x_pool);
  if (qr.rank() < k) {
    std::string cols;
    Eigen::VectorXi perm = qr.colsPermutation().indices();
    for (int j = qr.rank(); j < k; ++j)
      cols += (cols.empty() ? "" : ", ") + std::string("x") + std::to_string(perm[j] + 1);
    throw RankDeficientError("rank-deficient regressor matrix (collinear columns: " + cols + ")");
  }
  return qr.solve(y_pool);
}

/// One-way ANOVA of panel residuals: within mean square estimates sigma2_eps,
/// (between - within)/T estimates sigma2_alpha, truncated at zero.
inline void anova_components(const PanelDataset& data, const VectorXd& beta,
                             double* sigma2_eps, double* sigma2_alpha) {
  const int n = data.n_units, t = data.n_periods;
  MatrixXd r(n, t);
  for (int i = 0; i < n; ++i)
    r.row(i) = data.y.row(i) - (data.x[i] * beta).transpose();
  VectorXd unit_mean = r.rowwise().mean();
  double ssw = (r.colwise() - unit_mean).squaredNorm();
  double msw = ssw / (static_cast<double>(n) * (t - 1));
  double grand = unit_mean.mean();
  double msb = t * (unit_mean.array() - grand).square().sum() / (n - 1);
  *sigma2_eps = std::max(msw, kVarianceFloor);
  *sigma2_alpha = std::max(0.0, (msb - msw) / t);
}

}  // namespace detail

/// Pooled ordinary least squares with ANOVA variance components.
inline Theta fit_ols(const PanelDataset& data) {
  data.validate();
  Theta th;
  th.beta = detail::pooled_ols_beta(data);
  detail::anova_components(data, th.beta, &th.sigma2_eps, &th.sigma2_alpha);
  return th;
}

/// Feasible GLS: first-stage ANOVA components from OLS residuals, then the
/// weighted normal equations assembled with the Sherman-Morrison form of
/// Omega-hat inverse.
inline Theta fit_gls(const PanelDataset& data) {
  data.validate();
  VectorXd beta_ols = detail::pooled_ols_beta(data);
  double e, a;
  detail::anova_components(data, beta_ols, &e, &a);

  const int k = data.n_regressors;
  const double aa = e + data.n_periods * a;
  MatrixXd xtx = MatrixXd::Zero(k, k);
  VectorXd xty = VectorXd::Zero(k);
  for (int i = 0; i < data.n_units; ++i) {
    const MatrixXd& xi = data.x[i];
    VectorXd yi = data.y.row(i).transpose();
    VectorXd colsum = xi.colwise().sum();
    xtx += (xi.transpose() * xi) / e - (a / (e * aa)) * (colsum * colsum.transpose());
    xty += (xi.transpose() * yi) / e - (a * yi.sum() / (e * aa)) * colsum;
  }
  Eigen::LDLT<MatrixXd> ldlt(xtx);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw RankDeficientError("GLS normal equations are singular");
  Theta th;
  th.beta = ldlt.solve(xty);
  th.sigma2_eps = e;
  th.sigma2_alpha = a;
  return th;
}

enum class EstimatorKind { kOls, kGls, kMdpdeFixedGamma, kMdpdeAdaptive, kExternalPlugin };

/// Descriptor consumed by the simulation harness.
struct EstimatorSpec {
  std::string name;
  EstimatorKind kind = EstimatorKind::kOls;
  double gamma = 0.0;            // fixed-gamma MDPDE
  std::string plugin_command;    // external plugin: executable, CSV in, JSON Theta out
};

}  // namespace mdpde
