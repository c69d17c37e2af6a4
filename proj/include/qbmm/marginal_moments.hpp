#pragma once

#include <cmath>

#include "qbmm/common.hpp"

namespace qbmm {

// Scale constant of the normal approximation to the logistic cdf,
// g(x) ~ Phi(c x).
inline double logistic_normal_scale() { return std::sqrt(3.41) / M_PI; }

// Attenuation of conditional coefficients into marginal ones.
inline double attenuation(double sigma0_sq) {
  const double c = logistic_normal_scale();
  return 1.0 / std::sqrt(1.0 + c * c * sigma0_sq);
}

// Marginal mean approximation: g(a * eta) with a = (1 + c^2 sigma0^2)^{-1/2}.
inline double marginal_mean(double eta, double sigma0_sq) {
  return expit(attenuation(sigma0_sq) * eta);
}

// RE-at-zero mean from the marginal mean: pi_star = g(g^{-1}(pi_M) / a).
inline double pi_star_from_marginal(double pi_marginal, double sigma0_sq) {
  return expit(logit(pi_marginal) / attenuation(sigma0_sq));
}

struct MarginalSummary {
  double pi_star = 0.0;       // conditional mean at u = 0
  double pi_marginal = 0.0;
  double attenuation = 1.0;
  double var_marginal = 0.0;
  double phi_star = 1.0;      // position-varying marginal dispersion factor
  bool floored = false;       // second-order expansion went negative
};

// Second-order approximation to the marginal variance of the true counts,
//   X pi*(1-pi*) { phi + sigma0^2 (X - phi) pi*(1-pi*)
//                  + sigma0^2/2 (1-2pi*)^2 [1 + sigma0^2 pi*(1-pi*)(X - phi - 1/2)] }.
// A negative evaluation is a truncation artifact at extreme parameters; it is
// floored at the binomial variance and flagged.
inline MarginalSummary marginal_variance(double eta, double X, double phi, double sigma0_sq) {
  if (!(X >= 1.0)) throw domain_error("marginal_variance: depth must be >= 1");
  if (!(phi > 0.0)) throw domain_error("marginal_variance: phi must be positive");
  if (!(sigma0_sq >= 0.0)) throw domain_error("marginal_variance: sigma0_sq must be >= 0");
  MarginalSummary out;
  out.attenuation = attenuation(sigma0_sq);
  out.pi_star = expit(eta);
  out.pi_marginal = marginal_mean(eta, sigma0_sq);
  const double pq = out.pi_star * (1.0 - out.pi_star);
  const double one_two = 1.0 - 2.0 * out.pi_star;
  out.phi_star = phi + sigma0_sq * (X - phi) * pq +
                 0.5 * sigma0_sq * one_two * one_two *
                     (1.0 + sigma0_sq * pq * (X - phi - 0.5));
  out.var_marginal = X * pq * out.phi_star;
  if (out.phi_star < 0.0) {
    // truncation artifact; keep a usable reporting value
    out.floored = true;
    out.phi_star = 1.0;
    out.var_marginal = X * pq;
  }
  return out;
}

// Largest absolute gap between the logistic cdf and its normal approximation,
// grid-searched on [-10, 10].
inline double normal_logistic_gap(double step = 1e-4) {
  const double c = logistic_normal_scale();
  double worst = 0.0;
  for (double x = -10.0; x <= 10.0; x += step) {
    const double gap = std::fabs(expit(x) - 0.5 * std::erfc(-c * x / std::sqrt(2.0)));
    if (gap > worst) worst = gap;
  }
  return worst;
}

}  // namespace qbmm
