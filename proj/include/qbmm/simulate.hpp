#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qbmm/region_data.hpp"

namespace qbmm {

// ---------------------------------------------------------------------------
// Scenario curve sets. The shapes are smooth stand-ins chosen to match the
// published settings qualitatively (the sources are figures, not formulas);
// data/scenario*_curves.tsv carry the same tables for reference. Curves are
// parameterized on the unit interval.
// ---------------------------------------------------------------------------

using SmoothCurve = std::function<double(double)>;

struct ScenarioCurves {
  std::vector<SmoothCurve> beta;              // beta_0 .. beta_P on [0,1]
  std::vector<double> covariate_prob;         // Bernoulli rate per covariate
  double max_methylation_difference = 0.0;    // scenario 2 ordering key
};

inline constexpr int kScenario2Settings = 15;

inline double scenario2_pi1(double u) {
  return 0.35 + 0.5 * std::exp(-16.0 * (u - 0.6) * (u - 0.6)) + 0.05 * std::sin(2.0 * M_PI * u);
}

inline double scenario2_pi0(double u, int setting) {
  const double bump = std::exp(-30.0 * (u - 0.45) * (u - 0.45));
  const double delta = 0.035 * setting;
  return std::clamp(scenario2_pi1(u) - delta * bump, 0.02, 0.98);
}

inline ScenarioCurves scenario_curves(int scenario, int setting = 0) {
  ScenarioCurves out;
  if (scenario == 1) {
    out.beta = {
        [](double u) {
          return -0.8 + 2.2 * std::exp(-30.0 * (u - 0.35) * (u - 0.35)) +
                 1.6 * std::exp(-40.0 * (u - 0.78) * (u - 0.78));
        },
        [](double u) { return 1.4 * std::exp(-25.0 * (u - 0.5) * (u - 0.5)) - 0.3; },
        [](double u) {
          return 0.6 * u - 1.0 * std::exp(-35.0 * (u - 0.25) * (u - 0.25));
        },
        [](double) { return 0.0; },   // null covariate
    };
    out.covariate_prob = {0.51, 0.58, 0.5};
    return out;
  }
  if (scenario == 2) {
    if (setting < 0 || setting >= kScenario2Settings)
      throw domain_error("scenario 2 settings run from 0 to " +
                         std::to_string(kScenario2Settings - 1));
    out.beta = {
        [setting](double u) { return logit(scenario2_pi0(u, setting)); },
        [setting](double u) { return logit(scenario2_pi1(u)) - logit(scenario2_pi0(u, setting)); },
    };
    out.covariate_prob = {0.5};
    out.max_methylation_difference = 0.035 * setting;
    return out;
  }
  throw domain_error("unknown scenario " + std::to_string(scenario));
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

// Read depths: pre-specified profile plus a Bernoulli(1/2) per cell.
inline Eigen::MatrixXi gen_depths(const std::vector<double>& profile, int n_samples,
                                  std::mt19937_64& rng) {
  const int m = static_cast<int>(profile.size());
  Eigen::MatrixXi X(n_samples, m);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < n_samples; ++i)
    for (int j = 0; j < m; ++j) {
      if (!(profile[j] > 0.0)) throw domain_error("depth profile must be positive");
      X(i, j) = static_cast<int>(std::lround(profile[j])) + (coin(rng) ? 1 : 0);
    }
  return X;
}

// Beta-binomial count with proportion mu = pi and correlation
// rho = (phi - 1)/(X - 1), so Var(S) = phi X pi (1 - pi). phi = 1 and
// single-read sites fall back to the plain binomial.
inline int gen_count(double pi, int X, double phi, std::mt19937_64& rng) {
  if (!(phi >= 1.0)) throw domain_error("beta-binomial generator requires phi >= 1");
  if (X < 1) throw domain_error("depth must be >= 1");
  if (pi <= 0.0) return 0;
  if (pi >= 1.0) return X;
  if (phi == 1.0 || X == 1) {
    std::binomial_distribution<int> bin(X, pi);
    return bin(rng);
  }
  const double rho = (phi - 1.0) / (X - 1.0);
  if (!(rho < 1.0))
    throw domain_error("phi = " + std::to_string(phi) + " too large for depth " +
                       std::to_string(X));
  const double a = pi * (1.0 - rho) / rho;
  const double b = (1.0 - pi) * (1.0 - rho) / rho;
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double g1 = ga(rng), g2 = gb(rng);
  const double p = (g1 + g2 > 0.0) ? g1 / (g1 + g2) : pi;
  std::binomial_distribution<int> bin(X, std::clamp(p, 0.0, 1.0));
  return bin(rng);
}

// Observed count through the error channel: Bin(S, p1) + Bin(X - S, p0).
inline int contaminate(int S, int X, const ErrorRates& rates, std::mt19937_64& rng) {
  rates.validate();
  if (S < 0 || S > X) throw domain_error("contaminate: S outside [0, X]");
  int y = 0;
  if (S > 0 && rates.p1 > 0.0) {
    std::binomial_distribution<int> bin(S, rates.p1);
    y += bin(rng);
  }
  if (X - S > 0 && rates.p0 > 0.0) {
    std::binomial_distribution<int> bin(X - S, rates.p0);
    y += bin(rng);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Full region generator
// ---------------------------------------------------------------------------

struct SimScenario {
  int scenario = 1;
  int setting = 0;                    // scenario 2 only
  int n_samples = 100;
  int n_sites = 123;
  double phi = 1.0;
  double sigma0_sq = 0.0;
  ErrorRates rates;
  std::vector<double> depth_profile;  // empty -> constant 30 per site
  double position_start = 100.0;
  double position_step = 18.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_samples < 2) throw domain_error("simulation needs at least 2 samples");
    if (n_sites < 3) throw domain_error("simulation needs at least 3 sites");
    if (!(phi >= 1.0)) throw domain_error("generator requires phi >= 1");
    if (!(sigma0_sq >= 0.0)) throw domain_error("sigma0_sq must be >= 0");
    rates.validate();
  }
};

struct SimulatedRegion {
  RegionData region;                 // meth_reads hold the observed counts Y
  Eigen::MatrixXi true_counts;       // S, N x m
  Eigen::MatrixXi depths;            // X, N x m
  Eigen::MatrixXd pi;                // conditional means, N x m
  Eigen::VectorXd u;                 // subject random intercepts
  std::vector<double> positions;     // site coordinates
  ScenarioCurves curves;

  // True curve value for term p at site j (unit-interval parameterization).
  double beta_true(int p, int j) const {
    const double u01 = positions.size() > 1
                           ? (positions[j] - positions.front()) /
                                 (positions.back() - positions.front())
                           : 0.0;
    return curves.beta.at(p)(u01);
  }
};

inline SimulatedRegion simulate_region(const SimScenario& sc) {
  sc.validate();
  SimulatedRegion out;
  out.curves = scenario_curves(sc.scenario, sc.setting);
  const int P = static_cast<int>(out.curves.covariate_prob.size());
  const int N = sc.n_samples;
  const int m = sc.n_sites;
  std::mt19937_64 rng(mix_seed(sc.seed, 0));

  std::vector<double> profile = sc.depth_profile;
  if (profile.empty()) profile.assign(m, 30.0);
  if (static_cast<int>(profile.size()) != m)
    throw domain_error("depth profile length != site count");

  Eigen::MatrixXd Z(N, P);
  for (int p = 0; p < P; ++p) {
    std::bernoulli_distribution bern(out.curves.covariate_prob[p]);
    for (int i = 0; i < N; ++i) Z(i, p) = bern(rng) ? 1.0 : 0.0;
  }
  out.u.resize(N);
  if (sc.sigma0_sq > 0.0) {
    std::normal_distribution<double> re(0.0, std::sqrt(sc.sigma0_sq));
    for (int i = 0; i < N; ++i) out.u[i] = re(rng);
  } else {
    out.u.setZero();
  }

  out.positions.resize(m);
  for (int j = 0; j < m; ++j) out.positions[j] = sc.position_start + j * sc.position_step;

  out.depths = gen_depths(profile, N, rng);
  out.true_counts.resize(N, m);
  out.pi.resize(N, m);
  Eigen::MatrixXi Y(N, m);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < m; ++j) {
      const double u01 = m > 1 ? static_cast<double>(j) / (m - 1) : 0.0;
      double eta = out.curves.beta[0](u01) + out.u[i];
      for (int p = 1; p <= P; ++p) eta += out.curves.beta[p](u01) * Z(i, p - 1);
      out.pi(i, j) = expit(eta);
      out.true_counts(i, j) = gen_count(out.pi(i, j), out.depths(i, j), sc.phi, rng);
      Y(i, j) = contaminate(out.true_counts(i, j), out.depths(i, j), sc.rates, rng);
    }
  }

  RegionData& r = out.region;
  r.covariate_names.resize(P);
  for (int p = 0; p < P; ++p) r.covariate_names[p] = "Z" + std::to_string(p + 1);
  r.covariates = Z;
  r.sample_ids.resize(N);
  r.positions.assign(N, out.positions);
  r.total_reads.resize(N);
  r.meth_reads.resize(N);
  for (int i = 0; i < N; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%03d", i + 1);
    r.sample_ids[i] = buf;
    r.total_reads[i].resize(m);
    r.meth_reads[i].resize(m);
    for (int j = 0; j < m; ++j) {
      r.total_reads[i][j] = out.depths(i, j);
      r.meth_reads[i][j] = Y(i, j);
    }
  }
  r.validate();
  return out;
}

}  // namespace qbmm
