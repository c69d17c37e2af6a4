#pragma once

#include <random>
#include <string>
#include <vector>

#include "qbmm/error_model.hpp"
#include "qbmm/fit.hpp"
#include "qbmm/marginal_moments.hpp"
#include "qbmm/simulate.hpp"

namespace qbmm {

// Self-checks runnable from the CLI: each compares an implementation value
// against an independent numerical route (quadrature, Monte Carlo, finite
// differences) and reports the measured number.
struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;
  std::string detail;
};

struct ValidationOptions {
  std::uint64_t seed = 1;
  bool quick = false;       // trims Monte Carlo sizes for smoke runs
  unsigned threads = 1;
};

namespace detail {

inline CheckResult check_normal_logistic_gap() {
  const double gap = normal_logistic_gap();
  return {"normal_logistic_gap", std::abs(gap - 0.00948) <= 2e-4, gap,
          "max |g(x) - Phi(cx)| on [-10,10], reference 0.00948 +- 0.0002"};
}

// Error surface of the marginal-mean formula against Monte Carlo integration.
// The measured ceiling on this grid is about 0.011; the tighter 0.001 claim
// holds only near sigma0_sq = 0, which the detail string records.
inline CheckResult check_marginal_mean_surface(const ValidationOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, 101));
  const int n = opts.quick ? 100000 : 1000000;
  double worst = 0.0, worst_eta = 0.0, worst_s2 = 0.0;
  double worst_small = 0.0;
  for (double s2 : {0.0, 1.0, 3.0, 9.0}) {
    std::normal_distribution<double> re(0.0, std::sqrt(s2));
    for (int eta_i = -6; eta_i <= 6; ++eta_i) {
      const double eta = eta_i;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += expit(eta + (s2 > 0 ? re(rng) : 0.0));
      const double err = std::abs(marginal_mean(eta, s2) - acc / n);
      if (err > worst) {
        worst = err;
        worst_eta = eta;
        worst_s2 = s2;
      }
      if (s2 <= 0.0 && err > worst_small) worst_small = err;
    }
  }
  CheckResult out;
  out.name = "marginal_mean_error_surface";
  out.value = worst;
  out.pass = worst <= 0.012;   // measured approximation ceiling
  out.detail = "max |formula - MC| = " + std::to_string(worst) + " at eta=" +
               std::to_string(worst_eta) + ", sigma0_sq=" + std::to_string(worst_s2) +
               "; <=0.001 band holds only at sigma0_sq=0 (measured " +
               std::to_string(worst_small) + ")";
  return out;
}

inline CheckResult check_marginal_variance(const ValidationOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, 103));
  const int n = opts.quick ? 100000 : 1000000;
  const double eta = 0.5, X = 30.0, phi = 3.0, s2 = 1.0;
  std::normal_distribution<double> re(0.0, std::sqrt(s2));
  double s = 0.0, ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double pi = expit(eta + re(rng));
    const double v = gen_count(pi, static_cast<int>(X), phi, rng);
    s += v;
    ss += v * v;
  }
  const double mc_var = ss / n - (s / n) * (s / n);
  const double formula = marginal_variance(eta, X, phi, s2).var_marginal;
  const double rel = std::abs(formula - mc_var) / mc_var;
  return {"marginal_variance_vs_mc", rel <= 0.05, rel,
          "formula " + std::to_string(formula) + " vs MC " + std::to_string(mc_var)};
}

inline CheckResult check_generator_moments(const ValidationOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, 105));
  const int n = opts.quick ? 20000 : 100000;
  double worst = 0.0;
  std::string detail;
  for (double phi : {1.0, 3.0}) {
    for (int X : {20, 30}) {
      for (double pi : {0.3, 0.5}) {
        double s = 0.0, ss = 0.0;
        for (int i = 0; i < n; ++i) {
          const double v = gen_count(pi, X, phi, rng);
          s += v;
          ss += v * v;
        }
        const double var = ss / n - (s / n) * (s / n);
        const double expected = phi * X * pi * (1.0 - pi);
        const double rel = std::abs(var - expected) / expected;
        if (rel > worst) {
          worst = rel;
          detail = "worst at phi=" + std::to_string(phi) + " X=" + std::to_string(X) +
                   " pi=" + std::to_string(pi);
        }
      }
    }
  }
  return {"beta_binomial_variance", worst <= 0.03, worst, detail};
}

inline CheckResult check_score_gradient(const ValidationOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, 107));
  double worst = 0.0;
  const int n_regions = opts.quick ? 3 : 20;
  for (int rep = 0; rep < n_regions; ++rep) {
    SimScenario sc;
    sc.scenario = 2;
    sc.setting = 6;
    sc.n_samples = 10;
    sc.n_sites = 20;
    sc.phi = 1.0;
    sc.seed = mix_seed(opts.seed, 500 + rep);
    const SimulatedRegion sim = simulate_region(sc);
    const auto distinct = sim.region.distinct_positions();
    std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 4)};
    const DesignSystem d = build_design(sim.region, bases);
    const PenaltyStructure penalty(d);
    const Eigen::VectorXd S = flatten_counts(sim.region, sim.region.meth_reads);
    VarianceComponents theta{Eigen::VectorXd::Ones(2) * 0.8, 1.2};
    const double phi = 1.3;
    Eigen::VectorXd B(d.n_coef());
    std::normal_distribution<double> gauss(0.0, 0.2);
    for (int k = 0; k < B.size(); ++k) B[k] = gauss(rng);
    const Eigen::VectorXd U = quasi_score(B, d, penalty, S, theta, {phi});
    Eigen::VectorXd fd(B.size());
    auto objective = [&](const Eigen::VectorXd& coef) {
      const Eigen::VectorXd pi = mean_probabilities(d, coef);
      return -(deviance_sum(S, d.depth, pi) + penalty.quad_form(theta, coef)) / (2.0 * phi);
    };
    for (int k = 0; k < B.size(); ++k) {
      Eigen::VectorXd hi = B, lo = B;
      hi[k] += 1e-6;
      lo[k] -= 1e-6;
      fd[k] = (objective(hi) - objective(lo)) / 2e-6;
    }
    worst = std::max(worst, (U - fd).norm() / fd.norm());
  }
  return {"quasi_score_vs_fd", worst <= 1e-4, worst,
          std::to_string(n_regions) + " random toy regions"};
}

inline CheckResult check_outer_gradient(const ValidationOptions& opts) {
  double worst = 0.0;
  const int n_regions = opts.quick ? 2 : 20;
  for (int rep = 0; rep < n_regions; ++rep) {
    SimScenario sc;
    sc.scenario = 2;
    sc.setting = 4;
    sc.n_samples = 10;
    sc.n_sites = 20;
    sc.phi = 1.0;
    sc.sigma0_sq = 1.0;
    sc.seed = mix_seed(opts.seed, 900 + rep);
    const SimulatedRegion sim = simulate_region(sc);
    const auto distinct = sim.region.distinct_positions();
    std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 4)};
    const DesignSystem d = build_design(sim.region, bases);
    const PenaltyStructure penalty(d);
    const Eigen::VectorXd S = flatten_counts(sim.region, sim.region.meth_reads);
    VarianceComponents theta{Eigen::VectorXd::Ones(2) * 0.9, 0.8};
    const double phi = 1.2;
    const InnerResult inner =
        inner_solve(d, penalty, S, theta, {phi}, Eigen::VectorXd::Zero(d.n_coef()), 1e-11);
    const Eigen::VectorXd grad = laplace_gradient(inner.coef, d, penalty, S, theta, {phi});
    detail::RhoLayout layout{2, true};
    Eigen::VectorXd rho(layout.size());
    rho << std::log(theta.lambda[0]), std::log(theta.lambda[1]), std::log(theta.sigma0_sq),
        std::log(phi);
    Eigen::VectorXd fd(rho.size());
    for (int k = 0; k < rho.size(); ++k) {
      auto eval = [&](double shift) {
        Eigen::VectorXd r = rho;
        r[k] += shift;
        const VarianceComponents th = layout.theta(r);
        const InnerResult in = inner_solve(d, penalty, S, th, {layout.phi(r)}, inner.coef, 1e-12, 300);
        return laplace_objective(in.coef, d, penalty, S, th, {layout.phi(r)});
      };
      fd[k] = (eval(1e-4) - eval(-1e-4)) / 2e-4;
    }
    worst = std::max(worst, (grad - fd).norm() / fd.norm());
  }
  return {"laplace_gradient_vs_fd", worst <= 1e-3, worst,
          std::to_string(n_regions) + " random toy regions"};
}

inline CheckResult check_no_error_reduction(const ValidationOptions& opts) {
  double worst = 0.0;
  const int n_regions = opts.quick ? 2 : 10;
  for (int rep = 0; rep < n_regions; ++rep) {
    SimScenario sc;
    sc.scenario = 2;
    sc.setting = 7;
    sc.n_samples = 12;
    sc.n_sites = 20;
    sc.phi = 3.0;
    sc.sigma0_sq = 1.0;
    sc.seed = mix_seed(opts.seed, 1300 + rep);
    const SimulatedRegion sim = simulate_region(sc);
    const auto distinct = sim.region.distinct_positions();
    std::vector<SplineBasis> bases{build_basis(distinct, 5), build_basis(distinct, 5)};
    const DesignSystem d = build_design(sim.region, bases);
    const PenaltyStructure penalty(d);
    const Eigen::VectorXd Y = flatten_counts(sim.region, sim.region.meth_reads);
    const FitResult complete = fit(d, penalty, Y);
    const FitResult reduced = fit_with_error(d, penalty, Y, {0.0, 1.0});
    worst = std::max(worst, (complete.coef - reduced.coef).cwiseAbs().maxCoeff());
  }
  return {"no_error_reduction", worst <= 1e-8, worst,
          std::to_string(n_regions) + " seeded datasets"};
}

inline CheckResult check_fletcher_recovery(const ValidationOptions& opts) {
  const int n_reps = opts.quick ? 10 : 50;
  const double phi_true = 3.0;
  std::vector<double> phis(n_reps);
  parallel_for(n_reps, opts.threads, [&](std::size_t rep) {
    SimScenario sc;
    sc.scenario = 2;
    sc.setting = 6;
    sc.n_samples = 20;
    sc.n_sites = 40;
    sc.phi = phi_true;
    sc.sigma0_sq = 0.0;
    sc.seed = mix_seed(opts.seed, 1700 + rep);
    const SimulatedRegion sim = simulate_region(sc);
    const auto distinct = sim.region.distinct_positions();
    std::vector<SplineBasis> bases{build_basis(distinct, 5), build_basis(distinct, 5)};
    const DesignSystem d = build_design(sim.region, bases);
    const PenaltyStructure penalty(d);
    phis[rep] = fit(d, penalty, flatten_counts(sim.region, sim.region.meth_reads)).phi_fletcher;
  });
  double mean = 0.0;
  for (double v : phis) mean += v;
  mean /= n_reps;
  const double rel = std::abs(mean - phi_true) / phi_true;
  return {"fletcher_dispersion_recovery", rel <= 0.10, mean,
          std::to_string(n_reps) + " replicates, truth 3.0"};
}

}  // namespace detail

inline std::vector<CheckResult> run_validation_checks(const ValidationOptions& opts = {}) {
  std::vector<CheckResult> out;
  out.push_back(detail::check_normal_logistic_gap());
  out.push_back(detail::check_marginal_mean_surface(opts));
  out.push_back(detail::check_marginal_variance(opts));
  out.push_back(detail::check_generator_moments(opts));
  out.push_back(detail::check_score_gradient(opts));
  out.push_back(detail::check_outer_gradient(opts));
  out.push_back(detail::check_no_error_reduction(opts));
  out.push_back(detail::check_fletcher_recovery(opts));
  return out;
}

}  // namespace qbmm
