#pragma once

// Balanced panel data containers and the compound-symmetry covariance
// algebra shared by every estimator in this library.
//
// The T x T error covariance of one unit is
//   Omega = sigma2_eps * I_T + sigma2_alpha * 1 1'
// and is never materialized: its inverse, determinant and quadratic forms
// all reduce to O(T) expressions through the Sherman-Morrison identity.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdpde {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Hard floor for sigma2_eps inside all covariance algebra. Inputs below the
// floor are clamped (see OmegaView::floored) rather than rejected, so that
// degenerate zero-variance fits remain representable.
inline constexpr double kVarianceFloor = 1e-12;

/// Parameter triple of the random-effects model: mean coefficients plus the
/// two variance components. sigma2_nu = sigma2_alpha + sigma2_eps is derived,
/// never stored.
struct Theta {
  VectorXd beta;
  double sigma2_alpha = 0.0;  // >= 0, boundary 0 allowed
  double sigma2_eps = 1.0;    // > 0

  int dim() const { return static_cast<int>(beta.size()) + 2; }

  /// Packs as (beta, sigma2_alpha, sigma2_eps) - the parameter order used by
  /// gradients, score vectors and all (K+2) x (K+2) matrices.
  VectorXd packed() const {
    VectorXd v(dim());
    v.head(beta.size()) = beta;
    v[beta.size()] = sigma2_alpha;
    v[beta.size() + 1] = sigma2_eps;
    return v;
  }

  static Theta unpack(const VectorXd& v) {
    Theta t;
    t.beta = v.head(v.size() - 2);
    t.sigma2_alpha = v[v.size() - 2];
    t.sigma2_eps = v[v.size() - 1];
    return t;
  }

  void validate() const {
    if (!beta.allFinite() || !std::isfinite(sigma2_alpha) || !std::isfinite(sigma2_eps))
      throw std::domain_error("Theta: non-finite parameter");
    if (sigma2_alpha < 0.0)
      throw std::domain_error("Theta: sigma2_alpha must be >= 0");
    if (sigma2_eps <= 0.0)
      throw std::domain_error("Theta: sigma2_eps must be > 0");
  }
};

/// Balanced N x T panel with K regressors per cell. Regressor matrices are
/// stored per unit (T x K); column 0 is identically one when an intercept is
/// declared.
struct PanelDataset {
  int n_units = 0;      // N
  int n_periods = 0;    // T
  int n_regressors = 0; // K, including the intercept column if present
  bool has_intercept = false;
  MatrixXd y;                  // N x T
  std::vector<MatrixXd> x;     // N matrices, each T x K
  std::vector<std::string> unit_labels;
  std::vector<std::string> period_labels;

  void validate() const {
    if (n_units < 2 || n_periods < 2)
      throw std::invalid_argument("PanelDataset: need N >= 2 and T >= 2");
    if (n_regressors < 1)
      throw std::invalid_argument("PanelDataset: need K >= 1");
    if (static_cast<long>(n_units) * n_periods <= n_regressors + 2)
      throw std::invalid_argument("PanelDataset: N*T must exceed K + 2");
    if (y.rows() != n_units || y.cols() != n_periods)
      throw std::invalid_argument("PanelDataset: y must be N x T");
    if (static_cast<int>(x.size()) != n_units)
      throw std::invalid_argument("PanelDataset: x must hold one block per unit");
    for (const auto& xi : x)
      if (xi.rows() != n_periods || xi.cols() != n_regressors)
        throw std::invalid_argument("PanelDataset: each regressor block must be T x K");
    if (has_intercept) {
      for (const auto& xi : x)
        if ((xi.col(0).array() != 1.0).any())
          throw std::invalid_argument("PanelDataset: intercept declared but column 1 is not all ones");
    }
  }
};

/// Compact view of Omega = sigma2_eps I + sigma2_alpha 1 1'. All operations
/// are O(T); nothing T x T is ever formed.
class OmegaView {
 public:
  OmegaView(double sigma2_alpha, double sigma2_eps, int n_periods)
      : a_(sigma2_alpha), e_(sigma2_eps), t_(n_periods) {
    if (n_periods < 1) throw std::invalid_argument("OmegaView: T must be >= 1");
    if (!std::isfinite(sigma2_alpha) || !std::isfinite(sigma2_eps))
      throw std::domain_error("OmegaView: non-finite variance component");
    if (sigma2_alpha < 0.0) throw std::domain_error("OmegaView: sigma2_alpha < 0");
    if (sigma2_eps <= 0.0) throw std::domain_error("OmegaView: sigma2_eps <= 0");
    if (e_ < kVarianceFloor) {
      e_ = kVarianceFloor;
      floored_ = true;
    }
  }

  static OmegaView of(const Theta& theta, int n_periods) {
    return OmegaView(theta.sigma2_alpha, theta.sigma2_eps, n_periods);
  }

  double sigma2_alpha() const { return a_; }
  double sigma2_eps() const { return e_; }
  int n_periods() const { return t_; }
  /// True when sigma2_eps was clamped to the 1e-12 floor.
  bool floored() const { return floored_; }

  /// sigma2_eps + T * sigma2_alpha - the eigenvalue of Omega along 1.
  double a_total() const { return e_ + t_ * a_; }

  /// log |Omega| = (T-1) log sigma2_eps + log(sigma2_eps + T sigma2_alpha).
  double logdet() const {
    double v = (t_ - 1) * std::log(e_) + std::log(a_total());
    if (!std::isfinite(v)) throw std::domain_error("OmegaView: non-finite log-determinant");
    return v;
  }

  /// Omega^{-1} v = v / sigma2_eps - (sigma2_alpha sum(v) / (sigma2_eps A)) 1.
  VectorXd apply_inverse(const VectorXd& v) const {
    check_len(v);
    double shift = a_ * v.sum() / (e_ * a_total());
    return (v.array() / e_ - shift).matrix();
  }

  /// Quadratic form r' Omega^{-1} r via the Sherman-Morrison reduction;
  /// non-negative for every r.
  double quad_form(const VectorXd& r) const {
    check_len(r);
    double s = r.sum();
    double q = r.squaredNorm();
    double b = q / e_ - a_ * s * s / (e_ * a_total());
    return b < 0.0 ? 0.0 : b;  // clip tiny negative rounding
  }

 private:
  void check_len(const VectorXd& v) const {
    if (v.size() != t_) throw std::invalid_argument("OmegaView: vector length != T");
  }

  double a_, e_;
  int t_;
  bool floored_ = false;
};

/// r[i,t] = y[i,t] - x[i,t,:] . beta for every cell.
inline MatrixXd residuals(const PanelDataset& data, const Theta& theta) {
  if (theta.beta.size() != data.n_regressors)
    throw std::invalid_argument("residuals: beta length != K");
  MatrixXd r(data.n_units, data.n_periods);
  for (int i = 0; i < data.n_units; ++i)
    r.row(i) = data.y.row(i) - (data.x[i] * theta.beta).transpose();
  return r;
}

/// B_i = r_i' Omega^{-1} r_i for one unit's residual vector.
inline double quadratic_form_B(const VectorXd& r_i, const OmegaView& omega) {
  return omega.quad_form(r_i);
}

inline double omega_logdet(const OmegaView& omega) { return omega.logdet(); }

/// Gaussian log-density of unit i's response vector given its regressors:
/// -(T/2) log 2pi - logdet/2 - B_i/2.
inline double log_density(const PanelDataset& data, const Theta& theta, int unit_index) {
  if (unit_index < 0 || unit_index >= data.n_units)
    throw std::invalid_argument("log_density: unit index out of range");
  theta.validate();
  OmegaView om = OmegaView::of(theta, data.n_periods);
  VectorXd r = data.y.row(unit_index).transpose() - data.x[unit_index] * theta.beta;
  return -0.5 * data.n_periods * std::log(2.0 * std::numbers::pi)
         - 0.5 * om.logdet() - 0.5 * om.quad_form(r);
}

}  // namespace mdpde
