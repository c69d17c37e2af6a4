#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "qbmm/error_model.hpp"
#include "qbmm/simulate.hpp"

namespace qbmm {

// Plug-in covariance of the coefficient estimates under the expanded
// estimating-equation system: [X^T (W - W_delta) X + Sigma]^{-1} phi.
// W_delta vanishes for error-free rates.
inline Eigen::MatrixXd coef_covariance(const FitResult& fit, const DesignSystem& design,
                                       const PenaltyStructure& penalty, const Eigen::VectorXd& Y,
                                       const ErrorRates& rates) {
  rates.validate();
  const Eigen::VectorXd& pi = fit.pi_hat;
  Eigen::VectorXd w = weight_vector(design, pi);
  if (!rates.error_free()) {
    for (int l = 0; l < w.size(); ++l)
      w[l] -= design.depth[l] * error_delta(Y[l], design.depth[l], pi[l], rates);
  }
  Eigen::MatrixXd A = design.xtwx(w) + penalty.sigma(fit.theta);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
    throw numeric_error(
        "coefficient covariance system is indefinite; check the error-rate specification");
  return ldlt.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols())) * fit.phi();
}

struct CurveBand {
  std::vector<double> position;
  std::vector<double> estimate;
  std::vector<double> se;
  std::vector<double> lower;
  std::vector<double> upper;
};

// Pointwise confidence band for smooth term p on a position grid.
inline CurveBand pointwise_ci(const FitResult& fit, const Eigen::MatrixXd& covariance,
                              const DesignSystem& design, int p, const std::vector<double>& grid,
                              double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw domain_error("confidence level must be in (0,1)");
  const auto [a, b] = fit.blocks.at(p);
  const Eigen::MatrixXd Vp = covariance.block(a, a, b - a, b - a);
  const Eigen::VectorXd alpha = fit.alpha(p);
  const boost::math::normal_distribution<double> norm01;
  const double z = boost::math::quantile(norm01, 1.0 - (1.0 - level) / 2.0);
  CurveBand band;
  for (double t : grid) {
    const Eigen::RowVectorXd row = design.bases.at(p).eval(t);
    const double est = row.dot(alpha);
    const double var = row * Vp * row.transpose();
    const double se = std::sqrt(std::max(var, 0.0));
    band.position.push_back(t);
    band.estimate.push_back(est);
    band.se.push_back(se);
    band.lower.push_back(est - z * se);
    band.upper.push_back(est + z * se);
  }
  return band;
}

struct RegionTestEntry {
  int term = 0;
  double statistic = 0.0;
  double df1 = 0.0;               // tau_p
  double df2 = 0.0;               // M - tau
  double p_value = 1.0;
  int effective_rank = 0;         // rank of V_p used in the quadratic form
  double p_bootstrap = std::numeric_limits<double>::quiet_NaN();
};

// Regional F test of H0: beta_p(t) == 0 across the region. Singular V_p is
// inverted in the Moore-Penrose sense.
inline RegionTestEntry region_f_test(const FitResult& fit, const Eigen::MatrixXd& covariance,
                                     int p, int n_obs) {
  const auto [a, b] = fit.blocks.at(p);
  const int L = b - a;
  const double tau_p = fit.edf_per_term[p];
  const double df2 = n_obs - fit.edf_total;
  if (!(tau_p > 0.0)) throw domain_error("region_f_test: nonpositive numerator df");
  if (!(df2 > 0.0)) throw domain_error("region_f_test: observation count below total edf");
  const Eigen::MatrixXd Vp = covariance.block(a, a, L, L);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (Vp + Vp.transpose()));
  const double cutoff = 1e-8 * eig.eigenvalues().cwiseAbs().maxCoeff();
  const Eigen::VectorXd alpha = fit.alpha(p);
  double quad = 0.0;
  int rank = 0;
  for (int k = 0; k < L; ++k) {
    if (eig.eigenvalues()[k] > cutoff) {
      const double proj = eig.eigenvectors().col(k).dot(alpha);
      quad += proj * proj / eig.eigenvalues()[k];
      ++rank;
    }
  }
  RegionTestEntry out;
  out.term = p;
  out.statistic = quad / tau_p;
  out.df1 = tau_p;
  out.df2 = df2;
  out.effective_rank = rank;
  const boost::math::fisher_f_distribution<double> f(tau_p, df2);
  out.p_value = boost::math::cdf(boost::math::complement(f, std::max(out.statistic, 0.0)));
  return out;
}

struct RegionTest {
  std::vector<RegionTestEntry> tests;   // one per covariate term (p >= 1)
  double edf_total = 0.0;
  int n_obs = 0;
};

inline RegionTest test_all_covariates(const FitResult& fit, const Eigen::MatrixXd& covariance,
                                      int n_obs) {
  RegionTest out;
  out.edf_total = fit.edf_total;
  out.n_obs = n_obs;
  for (int p = 1; p < static_cast<int>(fit.blocks.size()); ++p)
    out.tests.push_back(region_f_test(fit, covariance, p, n_obs));
  return out;
}

// ---------------------------------------------------------------------------
// Parametric bootstrap calibration
// ---------------------------------------------------------------------------

struct BootstrapResult {
  double p_value = 1.0;
  double observed_statistic = 0.0;
  int replicates_used = 0;
  int replicates_failed = 0;
};

namespace detail {

// Simulate counts from a fitted null model, keeping depths and covariates.
inline Eigen::VectorXd simulate_from_fit(const DesignSystem& null_design,
                                         const FitResult& null_fit, const ErrorRates& rates,
                                         std::mt19937_64& rng) {
  const int M = null_design.n_rows();
  const int N = null_design.n_samples;
  const double sigma_gen = null_fit.sigma0_sq_marginal();
  const double phi_gen = std::max(1.0, null_fit.phi());   // beta-binomial cannot underdisperse
  Eigen::VectorXd u = Eigen::VectorXd::Zero(N);
  if (sigma_gen > 0.0) {
    std::normal_distribution<double> re(0.0, std::sqrt(sigma_gen));
    for (int i = 0; i < N; ++i) u[i] = re(rng);
  }
  const Eigen::VectorXd eta_fixed = null_design.Xb * null_fit.coef.head(null_design.n_fixed());
  Eigen::VectorXd Y(M);
  for (int l = 0; l < M; ++l) {
    const double pi = expit(eta_fixed[l] + u[null_design.row_sample[l]]);
    const int X = static_cast<int>(null_design.depth[l]);
    const int S = gen_count(pi, X, phi_gen, rng);
    Y[l] = contaminate(S, X, rates, rng);
  }
  return Y;
}

}  // namespace detail

// Empirical p-value for covariate term p from parametric bootstrap under the
// null fit (term removed). Replicate r uses a seed derived from (seed, r), so
// results do not depend on the thread count.
inline BootstrapResult bootstrap_pvalue(const RegionData& region, const ModelSpec& spec, int p,
                                        int n_replicates, std::uint64_t seed, unsigned threads = 1) {
  if (n_replicates < 99) throw domain_error("bootstrap needs at least 99 replicates");
  if (p < 1 || p > region.n_covariates()) throw domain_error("bootstrap: no such covariate term");
  ModelSpec sp = spec;
  if (sp.basis_ranks.empty()) sp.basis_ranks = default_basis_ranks(region, sp.rank_rule);
  sp.validate();

  const auto distinct = region.distinct_positions();
  std::vector<SplineBasis> bases;
  for (int L : sp.basis_ranks) bases.push_back(build_basis(distinct, L));
  const DesignSystem design = build_design(region, bases, sp.use_random_effect);
  const PenaltyStructure penalty(design);

  EsOptions opts{sp.tol, sp.max_inner_iter, sp.max_outer_iter, sp.max_es_iter};
  const Eigen::VectorXd Y = flatten_counts(region, region.meth_reads);
  const FitResult obs_fit = fit_with_error(design, penalty, Y, sp.error_rates, opts);
  const Eigen::MatrixXd obs_cov = coef_covariance(obs_fit, design, penalty, Y, sp.error_rates);
  const RegionTestEntry obs = region_f_test(obs_fit, obs_cov, p, design.n_rows());

  // Null model: drop covariate p (and its smooth term).
  RegionData null_region = region;
  null_region.covariate_names.erase(null_region.covariate_names.begin() + (p - 1));
  Eigen::MatrixXd Z(region.n_samples(), region.n_covariates() - 1);
  for (int k = 0, c = 0; k < region.n_covariates(); ++k)
    if (k != p - 1) Z.col(c++) = region.covariates.col(k);
  null_region.covariates = Z;
  std::vector<SplineBasis> null_bases;
  std::vector<int> null_ranks = sp.basis_ranks;
  null_ranks.erase(null_ranks.begin() + p);
  for (int L : null_ranks) null_bases.push_back(build_basis(distinct, L));
  const DesignSystem null_design = build_design(null_region, null_bases, sp.use_random_effect);
  const PenaltyStructure null_penalty(null_design);
  const FitResult null_fit = fit_with_error(null_design, null_penalty, Y, sp.error_rates, opts);

  std::vector<double> stats(n_replicates, std::numeric_limits<double>::quiet_NaN());
  parallel_for(static_cast<std::size_t>(n_replicates), threads, [&](std::size_t r) {
    std::mt19937_64 rng(mix_seed(seed, r));
    try {
      const Eigen::VectorXd Yb =
          detail::simulate_from_fit(null_design, null_fit, sp.error_rates, rng);
      const FitResult f = fit_with_error(design, penalty, Yb, sp.error_rates, opts);
      const Eigen::MatrixXd cov = coef_covariance(f, design, penalty, Yb, sp.error_rates);
      stats[r] = region_f_test(f, cov, p, design.n_rows()).statistic;
    } catch (const std::exception&) {
      // failed replicate recorded as NaN and skipped
    }
  });

  BootstrapResult out;
  out.observed_statistic = obs.statistic;
  int exceed = 0;
  for (double t : stats) {
    if (std::isnan(t)) {
      ++out.replicates_failed;
      continue;
    }
    ++out.replicates_used;
    if (t >= obs.statistic) ++exceed;
  }
  if (out.replicates_failed > 0.2 * n_replicates)
    throw numeric_error("bootstrap calibration failed: " + std::to_string(out.replicates_failed) +
                        " of " + std::to_string(n_replicates) + " replicates errored");
  out.p_value = (1.0 + exceed) / (out.replicates_used + 1.0);
  return out;
}

}  // namespace qbmm
