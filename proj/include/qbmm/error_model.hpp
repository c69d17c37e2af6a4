#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "qbmm/fit.hpp"

namespace qbmm {

// Sensitivity of the E-step expectation to the fitted mean; X_ij * delta_ij
// forms the W_delta correction in the coefficient covariance.
inline double error_delta(double Y, double X, double pi, const ErrorRates& rates) {
  if (rates.error_free()) return 0.0;
  const double md = rates.p1 * pi + rates.p0 * (1.0 - pi);
  const double ud = (1.0 - rates.p1) * pi + (1.0 - rates.p0) * (1.0 - pi);
  return Y * rates.p1 * rates.p0 / (md * md) +
         (X - Y) * (1.0 - rates.p1) * (1.0 - rates.p0) / (ud * ud);
}

// Conditional expectation of the true methylated count given the observed one
// under the two-rate error channel.
inline double e_step(double Y, double X, double pi_star, const ErrorRates& rates) {
  rates.validate();
  if (Y < 0.0 || Y > X) throw domain_error("e_step: Y outside [0, X]");
  const double p = clamp_prob(pi_star);
  const double meth_denom = rates.p1 * p + rates.p0 * (1.0 - p);
  const double unmeth_denom = (1.0 - rates.p1) * p + (1.0 - rates.p0) * (1.0 - p);
  double eta = 0.0;
  if (Y > 0.0) eta += Y * rates.p1 * p / meth_denom;
  if (Y < X) eta += (X - Y) * (1.0 - rates.p1) * p / unmeth_denom;
  return std::clamp(eta, 0.0, X);
}

inline Eigen::VectorXd e_step(const Eigen::VectorXd& Y, const Eigen::VectorXd& X,
                              const Eigen::VectorXd& pi_star, const ErrorRates& rates) {
  Eigen::VectorXd eta(Y.size());
  for (int l = 0; l < Y.size(); ++l) eta[l] = e_step(Y[l], X[l], pi_star[l], rates);
  return eta;
}

// Site-level dispersion of the observed counts implied by dispersion phi of
// the true counts: phi_Y = 1 + (phi - 1)(pi_Y - p0)(p1 - pi_Y) / (pi_Y(1 - pi_Y)).
inline double phi_y_from_phi(double phi, double pi_y, const ErrorRates& rates) {
  rates.validate();
  if (!(pi_y > rates.p0 && pi_y < rates.p1))
    throw domain_error("phi_y_from_phi: observed-scale mean outside (p0, p1)");
  return 1.0 + (phi - 1.0) * (pi_y - rates.p0) * (rates.p1 - pi_y) / (pi_y * (1.0 - pi_y));
}

inline double phi_from_phi_y(double phi_y, double pi_y, const ErrorRates& rates) {
  rates.validate();
  if (!(pi_y > rates.p0 && pi_y < rates.p1))
    throw domain_error("phi_from_phi_y: observed-scale mean outside (p0, p1)");
  return 1.0 + (phi_y - 1.0) * pi_y * (1.0 - pi_y) / ((pi_y - rates.p0) * (rates.p1 - pi_y));
}

// Plug-in dispersion for the true counts from the observed-data fit. The
// fitted observed-scale means are clamped into (p0, p1) before averaging;
// the ratio is negative outside that band.
inline Dispersion plugin_phi(double phi_y_hat, const Eigen::VectorXd& pi_y_hat,
                             const ErrorRates& rates, bool* floored = nullptr) {
  rates.validate();
  const double lo = rates.p0 + 1e-6;
  const double hi = rates.p1 - 1e-6;
  if (!(lo < hi)) throw domain_error("plugin_phi: error rates leave no feasible band");
  double mean_ratio = 0.0;
  for (int l = 0; l < pi_y_hat.size(); ++l) {
    const double piy = std::clamp(pi_y_hat[l], lo, hi);
    mean_ratio += (piy - rates.p0) * (rates.p1 - piy) / (piy * (1.0 - piy));
  }
  mean_ratio /= static_cast<double>(pi_y_hat.size());
  if (!(mean_ratio > 0.0)) throw numeric_error("plugin_phi: degenerate mean ratio");
  double phi = (phi_y_hat - 1.0) / mean_ratio + 1.0;
  if (floored) *floored = false;
  if (phi < FletcherPhi::kFloor) {
    phi = FletcherPhi::kFloor;
    if (floored) *floored = true;
  }
  return {phi};
}

struct EsOptions {
  double tol = 1e-6;
  int max_inner_iter = 200;
  int max_outer_iter = 200;
  int max_es_iter = 100;
};

// Hybrid expectation-solving fit for error-prone counts: complete-data fit on
// the observed counts, plug-in dispersion, then E/S iterations with phi held
// fixed. Error-free rates route straight to the complete-data fitter (the
// E-step is the identity there).
inline FitResult fit_with_error(const DesignSystem& design, const PenaltyStructure& penalty,
                                const Eigen::VectorXd& Y, const ErrorRates& rates,
                                const EsOptions& opts = {}) {
  rates.validate();
  FitOptions fit_opts;
  fit_opts.tol = opts.tol;
  fit_opts.max_inner_iter = opts.max_inner_iter;
  fit_opts.max_outer_iter = opts.max_outer_iter;
  if (rates.error_free()) return fit(design, penalty, Y, fit_opts);

  // Step 1: observed-data fit
  FitResult step1 = fit(design, penalty, Y, fit_opts);
  const double phi_y = step1.phi_fletcher;

  // Step 2: plug-in dispersion
  bool pl_floored = false;
  const Dispersion phi_hat = plugin_phi(phi_y, step1.pi_hat, rates, &pl_floored);

  // Step 3: ES iterations at fixed phi
  FitResult current = step1;
  Eigen::VectorXd coef_prev = step1.coef;
  int es_it = 0;
  bool es_converged = false;
  for (; es_it < opts.max_es_iter; ++es_it) {
    const Eigen::VectorXd pi_star = mean_probabilities(design, current.coef);
    const Eigen::VectorXd eta = e_step(Y, design.depth, pi_star, rates);
    FitOptions s_opts = fit_opts;
    s_opts.fixed_phi = phi_hat.phi;
    s_opts.theta_init = current.theta;
    s_opts.coef_init = current.coef;
    current = fit(design, penalty, eta, s_opts);
    const double delta = (current.coef - coef_prev).norm();
    coef_prev = current.coef;
    if (delta < opts.tol) {
      es_converged = true;
      ++es_it;
      break;
    }
  }
  if (!es_converged)
    throw convergence_error("ES iteration did not converge in " +
                            std::to_string(opts.max_es_iter) + " rounds");
  current.phi_y = phi_y;
  current.phi_plugin = phi_hat.phi;
  current.phi_floored = current.phi_floored || pl_floored;
  current.es_iterations = es_it;
  return current;
}

inline FitResult fit_with_error(const RegionData& region, const ModelSpec& spec,
                                const DesignSystem& design, const PenaltyStructure& penalty) {
  EsOptions opts;
  opts.tol = spec.tol;
  opts.max_inner_iter = spec.max_inner_iter;
  opts.max_outer_iter = spec.max_outer_iter;
  opts.max_es_iter = spec.max_es_iter;
  return fit_with_error(design, penalty, flatten_counts(region, region.meth_reads),
                        spec.error_rates, opts);
}

}  // namespace qbmm
