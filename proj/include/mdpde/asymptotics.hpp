#pragma once

// Score functions and the asymptotic-variance machinery of the minimum
// density power divergence estimator: closed-form at-model matrices J, K and
// vector xi, their empirical (misspecification-robust) counterparts, the
// sandwich covariance J^{-1} K J^{-1} / N, and the influence function.
//
// Closed forms used here (derived in docs/derivations.md):
//   M(g)      = (2pi)^{-Tg/2} (1+g)^{-(T+2)/2} |Omega|^{-g/2}
//   J_beta    = M(g) * x_i' Omega^{-1} x_i
//   J_vv      = M(g)/(1+g) * [ F_vv + (g^2/4) d_v d_v' ]
//   xi_beta   = 0,  xi_v = -(M(g) g / 2) d_v
//   K(g)      = J(2g) - xi(g) xi(g)'
// where v ranges over the two variance components, d_v = d log|Omega| / d v,
// and F is the 2x2 Fisher information of the variance components.

#include "mdpde/panel.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mdpde {

/// M(gamma) = (2pi)^{-T gamma/2} (1+gamma)^{-(T+2)/2}
///            sigma_eps^{-gamma(T-1)} (sigma2_eps + T sigma2_alpha)^{-gamma/2}.
inline double m_constant(const Theta& theta, double gamma, int n_periods) {
  theta.validate();
  if (gamma < 0.0 || !std::isfinite(gamma))
    throw std::domain_error("m_constant: gamma must be finite and >= 0");
  OmegaView om = OmegaView::of(theta, n_periods);
  double log_m = -0.5 * gamma * (n_periods * std::log(2.0 * std::numbers::pi) + om.logdet())
                 - 0.5 * (n_periods + 2) * std::log1p(gamma);
  return std::exp(log_m);
}

namespace detail {

/// Per-unit score pieces that every formula reuses.
struct UnitScore {
  VectorXd u;      // (K+2): (u_beta, u_sigma2_alpha, u_sigma2_eps)
  double b = 0.0;  // r' Omega^{-1} r
};

inline UnitScore unit_score(const MatrixXd& x_i, const VectorXd& r_i, const OmegaView& om) {
  const int t = om.n_periods();
  const int k = static_cast<int>(x_i.cols());
  const double e = om.sigma2_eps();
  const double a = om.sigma2_alpha();
  const double aa = om.a_total();            // e + T a
  const double g_eff = e + (t - 1) * a;      // e + (T-1) a
  const double c = 2.0 * e + t * a;

  const double s = r_i.sum();
  const double q = r_i.squaredNorm();

  UnitScore out;
  out.b = om.quad_form(r_i);
  out.u.resize(k + 2);
  VectorXd xbar = x_i.colwise().mean();
  out.u.head(k) = (x_i.transpose() * r_i) / e - (t * a * s / (e * aa)) * xbar;
  out.u[k] = -0.5 * t / aa + 0.5 * s * s / (aa * aa);
  out.u[k + 1] = -0.5 * t * g_eff / (e * aa) + 0.5 * q / (e * e)
                 - 0.5 * a * c * s * s / (e * e * aa * aa);
  return out;
}

/// (d log|Omega| / d sigma2_alpha, d log|Omega| / d sigma2_eps).
inline Eigen::Vector2d logdet_grad(const OmegaView& om) {
  const int t = om.n_periods();
  const double e = om.sigma2_eps();
  const double aa = om.a_total();
  return {t / aa, t * (e + (t - 1) * om.sigma2_alpha()) / (e * aa)};
}

/// Fisher information of (sigma2_alpha, sigma2_eps):
/// F_vw = tr(Omega^{-1} Omega_v Omega^{-1} Omega_w) / 2.
inline Eigen::Matrix2d variance_fisher(const OmegaView& om) {
  const int t = om.n_periods();
  const double e = om.sigma2_eps();
  const double aa = om.a_total();
  Eigen::Matrix2d f;
  f(0, 0) = 0.5 * t * t / (aa * aa);
  f(0, 1) = f(1, 0) = 0.5 * t / (aa * aa);
  f(1, 1) = 0.5 * ((t - 1) / (e * e) + 1.0 / (aa * aa));
  return f;
}

/// x_i' Omega^{-1} x_i without forming Omega.
inline MatrixXd xt_omega_inv_x(const MatrixXd& x_i, const OmegaView& om) {
  const double e = om.sigma2_eps();
  const double a = om.sigma2_alpha();
  const int t = om.n_periods();
  VectorXd colsum = x_i.colwise().sum();
  return (x_i.transpose() * x_i) / e - (a / (e * om.a_total())) * (colsum * colsum.transpose());
}

}  // namespace detail

/// Score u_theta(y_i | x_i) = d log f / d theta, packed (beta, s2a, s2e).
inline VectorXd score_u(const PanelDataset& data, const Theta& theta, int unit_index) {
  theta.validate();
  if (unit_index < 0 || unit_index >= data.n_units)
    throw std::invalid_argument("score_u: unit index out of range");
  OmegaView om = OmegaView::of(theta, data.n_periods);
  VectorXd r = data.y.row(unit_index).transpose() - data.x[unit_index] * theta.beta;
  return detail::unit_score(data.x[unit_index], r, om).u;
}

/// xi^{(i)} = int u f^{1+gamma} at the model; identical across units:
/// beta block 0, variance blocks -(M gamma / 2) * d log|Omega| / d v.
inline VectorXd closed_form_xi(const Theta& theta, double gamma, int n_periods) {
  const double m = m_constant(theta, gamma, n_periods);
  OmegaView om = OmegaView::of(theta, n_periods);
  Eigen::Vector2d d = detail::logdet_grad(om);
  const int k = static_cast<int>(theta.beta.size());
  VectorXd xi = VectorXd::Zero(k + 2);
  xi[k] = -0.5 * m * gamma * d[0];
  xi[k + 1] = -0.5 * m * gamma * d[1];
  return xi;
}

/// J = (1/N) sum_i int u u' f^{1+gamma} at the model. Block diagonal between
/// beta and the variance pair; the beta-variance cross blocks vanish.
inline MatrixXd closed_form_J(const PanelDataset& data, const Theta& theta, double gamma) {
  theta.validate();
  data.validate();
  const int k = data.n_regressors;
  OmegaView om = OmegaView::of(theta, data.n_periods);
  const double m = m_constant(theta, gamma, data.n_periods);

  MatrixXd jb = MatrixXd::Zero(k, k);
  for (const auto& xi : data.x) jb += detail::xt_omega_inv_x(xi, om);
  jb *= m / data.n_units;

  Eigen::Vector2d d = detail::logdet_grad(om);
  Eigen::Matrix2d jv =
      (m / (1.0 + gamma)) *
      (detail::variance_fisher(om) + 0.25 * gamma * gamma * (d * d.transpose()));

  MatrixXd j = MatrixXd::Zero(k + 2, k + 2);
  j.topLeftCorner(k, k) = jb;
  j.bottomRightCorner(2, 2) = jv;
  return j;
}

/// K = (1/N) sum_i [ J^{(i)}(2 gamma) - xi(gamma) xi(gamma)' ].
inline MatrixXd closed_form_K(const PanelDataset& data, const Theta& theta, double gamma) {
  MatrixXd j2 = closed_form_J(data, theta, 2.0 * gamma);
  VectorXd xi = closed_form_xi(theta, gamma, data.n_periods);
  return j2 - xi * xi.transpose();
}

/// Symmetric (pseudo-)inverse via eigendecomposition. Directions with
/// eigenvalue below 1e-10 * lambda_max are treated as singular.
inline MatrixXd symmetric_pinv(const MatrixXd& m, bool* pseudo_used = nullptr) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
  const VectorXd& ev = es.eigenvalues();
  double lmax = ev.cwiseAbs().maxCoeff();
  double cutoff = 1e-10 * lmax;
  VectorXd inv_ev(ev.size());
  bool pseudo = false;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] > cutoff) {
      inv_ev[i] = 1.0 / ev[i];
    } else {
      inv_ev[i] = 0.0;
      pseudo = true;
    }
  }
  if (pseudo_used) *pseudo_used = pseudo;
  return es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
}

/// The pieces of the sandwich, bundled for inspection and tests.
struct SandwichParts {
  MatrixXd j_matrix;
  MatrixXd k_matrix;
  VectorXd xi_per_unit_common;
  double m_constant = 1.0;
};

/// Misspecification-robust J and K: the g-dependent integrals of the general
/// definitions are replaced by their sample analogues at the observed
/// responses; everything f_theta-only stays in closed form.
inline SandwichParts empirical_JK(const PanelDataset& data, const Theta& theta, double gamma) {
  theta.validate();
  data.validate();
  const int n = data.n_units;
  const int t = data.n_periods;
  const int k = data.n_regressors;
  const int p = k + 2;
  OmegaView om = OmegaView::of(theta, t);
  const double m = m_constant(theta, gamma, t);
  const double logdet = om.logdet();
  const double log_w0 = -0.5 * gamma * (t * std::log(2.0 * std::numbers::pi) + logdet);

  Eigen::Vector2d d = detail::logdet_grad(om);
  Eigen::Matrix2d fisher = detail::variance_fisher(om);

  // Closed part of J^{(i)}: (1+g) J_model - int I_theta f^{1+gamma}. The
  // beta block cancels exactly (int I_bb f^{1+g} = M(1+g) x'Om^-1 x); the
  // variance block reduces to M [ g F + (g^2/4) d d' ].
  Eigen::Matrix2d j_closed_vv =
      m * (gamma * fisher + 0.25 * gamma * gamma * (d * d.transpose()));

  MatrixXd j = MatrixXd::Zero(p, p);
  MatrixXd k_hat = MatrixXd::Zero(p, p);
  VectorXd xi_bar = VectorXd::Zero(p);

  auto apply_omega_v = [&](const VectorXd& v, bool alpha_block) -> VectorXd {
    // Omega_alpha = 1 1', Omega_eps = I.
    if (alpha_block) return VectorXd::Constant(t, v.sum());
    return v;
  };

  for (int i = 0; i < n; ++i) {
    const MatrixXd& x_i = data.x[i];
    VectorXd r = data.y.row(i).transpose() - x_i * theta.beta;
    detail::UnitScore sc = detail::unit_score(x_i, r, om);
    double w = std::exp(log_w0 - 0.5 * gamma * sc.b);  // f^gamma(y_i | x_i)

    // Observed information I_theta(y_i | x_i) = -du/dtheta.
    MatrixXd info = MatrixXd::Zero(p, p);
    MatrixXd xox = detail::xt_omega_inv_x(x_i, om);
    info.topLeftCorner(k, k) = xox;
    VectorXd oir = om.apply_inverse(r);
    for (int v = 0; v < 2; ++v) {
      VectorXd ov = om.apply_inverse(apply_omega_v(oir, v == 0));
      info.block(0, k + v, k, 1) = x_i.transpose() * ov;
      info.block(k + v, 0, 1, k) = info.block(0, k + v, k, 1).transpose();
      for (int w2 = v; w2 < 2; ++w2) {
        VectorXd ow = apply_omega_v(om.apply_inverse(apply_omega_v(oir, w2 == 0)), v == 0);
        double quad = oir.dot(ow);
        info(k + v, k + w2) = info(k + w2, k + v) = -fisher(v, w2) + quad;
      }
    }

    // One-sample plug-in of the g-integrals.
    MatrixXd uu = sc.u * sc.u.transpose();
    MatrixXd j_i = MatrixXd::Zero(p, p);
    j_i.bottomRightCorner(2, 2) = j_closed_vv;
    j_i += (info - gamma * uu) * w;
    j += j_i;

    k_hat += uu * (w * w);
    xi_bar += sc.u * w;
  }
  j /= n;
  k_hat /= n;
  xi_bar /= n;
  k_hat -= xi_bar * xi_bar.transpose();

  SandwichParts parts;
  parts.j_matrix = 0.5 * (j + j.transpose());
  parts.k_matrix = 0.5 * (k_hat + k_hat.transpose());
  parts.xi_per_unit_common = closed_form_xi(theta, gamma, t);
  parts.m_constant = m;
  return parts;
}

struct CovarianceResult {
  MatrixXd cov;                // (K+2) x (K+2), finite-sample covariance of theta_hat
  bool pseudo_inverse_used = false;
  bool boundary = false;       // sigma2_alpha at or near the floor
  std::vector<std::string> notes;
};

/// Sandwich covariance J^{-1} K J^{-1} / N. By default J and K come from the
/// at-model closed forms evaluated at theta_hat; set `empirical` for the
/// sample-analogue versions.
inline CovarianceResult sandwich_covariance(const PanelDataset& data, const Theta& theta_hat,
                                            double gamma, bool empirical = false) {
  MatrixXd j, k;
  if (empirical) {
    SandwichParts parts = empirical_JK(data, theta_hat, gamma);
    j = parts.j_matrix;
    k = parts.k_matrix;
  } else {
    j = closed_form_J(data, theta_hat, gamma);
    k = closed_form_K(data, theta_hat, gamma);
  }
  CovarianceResult res;
  MatrixXd jinv = symmetric_pinv(j, &res.pseudo_inverse_used);
  if (res.pseudo_inverse_used)
    res.notes.push_back("singular J: pseudo-inverse used");
  res.cov = jinv * k * jinv / data.n_units;
  res.cov = 0.5 * (res.cov + res.cov.transpose());
  if (theta_hat.sigma2_alpha <= 10.0 * kVarianceFloor) {
    res.boundary = true;
    res.notes.push_back("sigma2_alpha at boundary - interpret with caution");
  }
  return res;
}

/// Influence function at a contamination point (x, y):
/// IF = J^{-1} ( u(y|x) f^gamma(y|x) - xi ), with J and xi at the model.
inline VectorXd influence_function(const MatrixXd& x_point, const VectorXd& y_point,
                                   const Theta& theta, double gamma,
                                   const PanelDataset& data) {
  theta.validate();
  if (x_point.rows() != data.n_periods || x_point.cols() != data.n_regressors)
    throw std::invalid_argument("influence_function: x_point must be T x K");
  if (y_point.size() != data.n_periods)
    throw std::invalid_argument("influence_function: y_point must have length T");

  OmegaView om = OmegaView::of(theta, data.n_periods);
  VectorXd r = y_point - x_point * theta.beta;
  detail::UnitScore sc = detail::unit_score(x_point, r, om);
  double log_f = -0.5 * data.n_periods * std::log(2.0 * std::numbers::pi)
                 - 0.5 * om.logdet() - 0.5 * sc.b;
  double fg = gamma == 0.0 ? 1.0 : std::exp(gamma * log_f);

  MatrixXd j = closed_form_J(data, theta, gamma);
  bool pseudo = false;
  MatrixXd jinv = symmetric_pinv(j, &pseudo);
  if (pseudo) throw std::domain_error("influence_function: singular J");
  VectorXd xi = closed_form_xi(theta, gamma, data.n_periods);
  return jinv * (sc.u * fg - xi);
}

}  // namespace mdpde
