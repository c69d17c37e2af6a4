#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "qbmm/fit.hpp"
#include "qbmm/simulate.hpp"
#include "test_util.hpp"

using namespace qbmm;
using Catch::Approx;

namespace {

struct Toy {
  DesignSystem design;
  PenaltyStructure penalty;
  Eigen::VectorXd S;
};

Toy make_toy(int n_samples, int n_sites, unsigned seed) {
  const RegionData r = test::toy_region(n_samples, n_sites, seed);
  const auto distinct = r.distinct_positions();
  std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 3)};
  Toy t{build_design(r, bases), {}, {}};
  t.penalty = PenaltyStructure(t.design);
  t.S = flatten_counts(r, r.meth_reads);
  return t;
}

Toy simulated_toy(double phi, double sigma0_sq, int n_samples, int n_sites, unsigned seed) {
  SimScenario sc;
  sc.scenario = 1;
  sc.n_samples = n_samples;
  sc.n_sites = n_sites;
  sc.phi = phi;
  sc.sigma0_sq = sigma0_sq;
  sc.seed = seed;
  const SimulatedRegion sim = simulate_region(sc);
  const auto distinct = sim.region.distinct_positions();
  std::vector<SplineBasis> bases;
  for (int p = 0; p < 4; ++p) bases.push_back(build_basis(distinct, 5));
  Toy t{build_design(sim.region, bases), {}, {}};
  t.penalty = PenaltyStructure(t.design);
  t.S = flatten_counts(sim.region, sim.region.meth_reads);
  return t;
}

}  // namespace

TEST_CASE("inner solve recognizes an exact fixed point", "[fit]") {
  Toy t = make_toy(4, 8, 7);
  const Eigen::VectorXd S = t.design.depth / 2.0;   // residual vanishes at B = 0
  VarianceComponents theta{Eigen::VectorXd::Ones(2), 1.0};
  const InnerResult res =
      inner_solve(t.design, t.penalty, S, theta, {1.0}, Eigen::VectorXd::Zero(t.design.n_coef()));
  CHECK(res.iterations == 0);
  CHECK(res.coef.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("intercept-only solve returns the pooled proportion", "[fit]") {
  // all observations at one position; the intercept column is unpenalized and
  // the RE variance sits at its boundary, so the fit pools the counts
  const int N = 3;
  DesignSystem d;
  d.Xb = Eigen::MatrixXd::Ones(N, 1);
  d.row_sample = {0, 1, 2};
  d.depth = (Eigen::VectorXd(3) << 10, 14, 8).finished();
  d.position = Eigen::VectorXd::Constant(3, 100.0);
  d.blocks = {{0, 1}};
  d.n_samples = N;
  d.include_re = true;
  for (int i = 0; i < N; ++i) d.row_obs.emplace_back(i, 0);
  const PenaltyStructure penalty({Eigen::MatrixXd::Zero(1, 1)}, {{0, 1}}, 1, N, true);
  Eigen::VectorXd S(3);
  S << 4, 6, 1;
  VarianceComponents theta{Eigen::VectorXd::Constant(1, 1e8), 1e-8};
  const InnerResult res = inner_solve(d, penalty, S, theta, {1.0}, Eigen::VectorXd::Zero(4));
  const double pooled = S.sum() / d.depth.sum();
  CHECK(expit(res.coef[0]) == Approx(pooled).margin(1e-6));
  CHECK(res.coef.tail(3).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("inner solution is independent of phi", "[fit]") {
  Toy t = make_toy(5, 9, 11);
  VarianceComponents theta{(Eigen::VectorXd(2) << 0.6, 1.8).finished(), 0.7};
  const Eigen::VectorXd B0 = Eigen::VectorXd::Zero(t.design.n_coef());
  const InnerResult a = inner_solve(t.design, t.penalty, t.S, theta, {1.0}, B0);
  const InnerResult b = inner_solve(t.design, t.penalty, t.S, theta, {3.0}, B0);
  CHECK((a.coef - b.coef).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("inner solve reports non-convergence with the last iterate", "[fit]") {
  Toy t = make_toy(4, 8, 19);
  VarianceComponents theta{Eigen::VectorXd::Ones(2), 1.0};
  CHECK_THROWS_AS(inner_solve(t.design, t.penalty, t.S, theta, {1.0},
                              Eigen::VectorXd::Zero(t.design.n_coef()), 1e-12, 1),
                  convergence_error);
}

TEST_CASE("outer gradient matches finite differences of the laplace objective", "[fit]") {
  for (unsigned seed : {3u, 101u}) {
    Toy t = make_toy(6, 10, seed);
    VarianceComponents theta{(Eigen::VectorXd(2) << 0.8, 1.5).finished(), 0.9};
    const double phi = 1.4;
    const InnerResult inner = inner_solve(t.design, t.penalty, t.S, theta, {phi},
                                          Eigen::VectorXd::Zero(t.design.n_coef()), 1e-11);
    const Eigen::VectorXd grad =
        laplace_gradient(inner.coef, t.design, t.penalty, t.S, theta, {phi});

    detail::RhoLayout layout{2, true};
    Eigen::VectorXd rho(layout.size());
    rho << std::log(theta.lambda[0]), std::log(theta.lambda[1]), std::log(theta.sigma0_sq),
        std::log(phi);
    auto objective = [&](const Eigen::VectorXd& r) {
      const VarianceComponents th = layout.theta(r);
      const double ph = layout.phi(r);
      const InnerResult in =
          inner_solve(t.design, t.penalty, t.S, th, {ph}, inner.coef, 1e-12, 300);
      return laplace_objective(in.coef, t.design, t.penalty, t.S, th, {ph});
    };
    const Eigen::VectorXd fd = test::fd_gradient(objective, rho, 1e-4);
    CHECK((grad - fd).norm() / fd.norm() < 1e-3);
  }
}

TEST_CASE("outer step is a no-op at a stationary point", "[fit]") {
  Toy t = make_toy(5, 8, 29);
  OuterOptions opts;
  VarianceComponents theta0{Eigen::VectorXd::Ones(2), 1.0};
  OuterState st = make_outer_state(t.design, t.penalty, t.S, theta0, 1.0, opts);
  for (int it = 0; it < 100; ++it)
    if (!outer_step(st, t.design, t.penalty, t.S, opts)) break;
  const Eigen::VectorXd rho = st.rho;
  const double obj = st.objective;
  CHECK_FALSE(outer_step(st, t.design, t.penalty, t.S, opts));
  CHECK(st.rho == rho);
  CHECK(st.objective == obj);
}

TEST_CASE("accepted outer steps never decrease the objective", "[fit]") {
  std::mt19937_64 seeds(404);
  for (int rep = 0; rep < 50; ++rep) {
    Toy t = make_toy(4, 8, static_cast<unsigned>(seeds()));
    OuterOptions opts;
    VarianceComponents theta0{Eigen::VectorXd::Ones(2), 1.0};
    OuterState st = make_outer_state(t.design, t.penalty, t.S, theta0, 1.0, opts);
    double prev = st.objective;
    for (int it = 0; it < 25; ++it) {
      if (!outer_step(st, t.design, t.penalty, t.S, opts)) break;
      CHECK(st.objective >= prev - 1e-10);
      prev = st.objective;
    }
  }
}

TEST_CASE("full fit converges and reports sane diagnostics", "[fit]") {
  Toy t = simulated_toy(1.0, 0.0, 20, 30, 91);
  const FitResult f = fit(t.design, t.penalty, t.S);
  CHECK(f.converged);
  CHECK(f.edf_total > 0.0);
  CHECK(f.edf_total < t.design.n_coef());
  CHECK(f.phi_fletcher > 0.0);
  CHECK(f.phi_lik > 0.0);
  CHECK_FALSE(f.degenerate);
  // objective trace is monotone over accepted steps
  for (std::size_t i = 1; i < f.objective_trace.size(); ++i)
    CHECK(f.objective_trace[i] >= f.objective_trace[i - 1] - 1e-9);
}

TEST_CASE("fit is deterministic", "[fit]") {
  Toy t = simulated_toy(3.0, 1.0, 12, 20, 7);
  const FitResult a = fit(t.design, t.penalty, t.S);
  const FitResult b = fit(t.design, t.penalty, t.S);
  CHECK(a.coef == b.coef);
  CHECK(a.phi_fletcher == b.phi_fletcher);
  CHECK(a.theta.lambda == b.theta.lambda);
}

TEST_CASE("all-zero counts flag a degenerate region", "[fit]") {
  Toy t = make_toy(4, 8, 3);
  const Eigen::VectorXd S = Eigen::VectorXd::Zero(t.design.n_rows());
  const FitResult f = fit(t.design, t.penalty, S);
  CHECK(f.degenerate);
  CHECK(f.pi_hat.maxCoeff() < 0.05);
  CHECK(f.phi_floored);
  CHECK(f.phi_fletcher == FletcherPhi::kFloor);
}

TEST_CASE("fletcher estimator identities", "[fit]") {
  SECTION("exact fit floors the estimate") {
    Eigen::VectorXd X = Eigen::VectorXd::Constant(30, 10.0);
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(30, 0.3);
    Eigen::VectorXd S = X.cwiseProduct(pi);
    const FletcherPhi f = fletcher_phi(S, X, pi, 2.0);
    CHECK(f.pearson == 0.0);
    CHECK(f.abar == 0.0);
    CHECK(f.floored);
    CHECK(f.fletcher == FletcherPhi::kFloor);
  }
  SECTION("pi = 1/2 makes fletcher equal pearson") {
    std::mt19937_64 rng(8);
    std::binomial_distribution<int> bin(12, 0.5);
    Eigen::VectorXd X = Eigen::VectorXd::Constant(200, 12.0);
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(200, 0.5);
    Eigen::VectorXd S(200);
    for (int l = 0; l < 200; ++l) S[l] = bin(rng);
    const FletcherPhi f = fletcher_phi(S, X, pi, 3.0);
    CHECK(f.abar == Approx(0.0).margin(1e-12));
    CHECK(f.fletcher == Approx(f.pearson));
  }
  SECTION("df precondition") {
    Eigen::VectorXd X = Eigen::VectorXd::Constant(5, 10.0);
    Eigen::VectorXd pi = Eigen::VectorXd::Constant(5, 0.4);
    CHECK_THROWS_AS(fletcher_phi(X / 2, X, pi, 5.0), domain_error);
  }
}

TEST_CASE("edf shrinkage limits", "[fit]") {
  Toy t = make_toy(6, 12, 57);
  const int P1 = 2;
  SECTION("full shrinkage leaves the penalty null space") {
    VarianceComponents theta{Eigen::VectorXd::Constant(P1, 1e10), 1e-8};
    const Eigen::VectorXd pi = Eigen::VectorXd::Constant(t.design.n_rows(), 0.5);
    const Eigen::MatrixXd xtwx = t.design.xtwx(weight_vector(t.design, pi));
    const Edf e = edf(t.penalty, xtwx, xtwx + t.penalty.sigma(theta));
    CHECK(e.total == Approx(t.penalty.null_dim()).margin(0.01));
  }
  SECTION("no shrinkage recovers the column-space rank") {
    VarianceComponents theta{Eigen::VectorXd::Constant(P1, 1e-10), 1e6};
    const Eigen::VectorXd pi = Eigen::VectorXd::Constant(t.design.n_rows(), 0.5);
    const Eigen::MatrixXd xtwx = t.design.xtwx(weight_vector(t.design, pi));
    const Edf e = edf(t.penalty, xtwx, xtwx + t.penalty.sigma(theta));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(t.design.full_matrix());
    int rank = 0;
    for (int k = 0; k < svd.singularValues().size(); ++k)
      if (svd.singularValues()[k] > 1e-8 * svd.singularValues()[0]) ++rank;
    CHECK(e.total == Approx(rank).margin(0.05));
  }
  SECTION("per-term edf stays within (0, L_p]") {
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> logl(-4.0, 6.0);
    for (int rep = 0; rep < 50; ++rep) {
      VarianceComponents theta{(Eigen::VectorXd(2) << std::exp(logl(rng)), std::exp(logl(rng)))
                                   .finished(),
                               std::exp(logl(rng) * 0.5)};
      Eigen::VectorXd pi(t.design.n_rows());
      std::uniform_real_distribution<double> up(0.15, 0.85);
      for (int l = 0; l < pi.size(); ++l) pi[l] = up(rng);
      const Eigen::MatrixXd xtwx = t.design.xtwx(weight_vector(t.design, pi));
      const Edf e = edf(t.penalty, xtwx, xtwx + t.penalty.sigma(theta));
      for (int p = 0; p < P1; ++p) {
        CHECK(e.per_term[p] > 0.0);
        const auto [a, b] = t.penalty.block_range(p);
        CHECK(e.per_term[p] <= (b - a) + 1e-8);
      }
    }
  }
}

TEST_CASE("multiplicative-only submodel drops the RE block", "[fit]") {
  const RegionData r = test::toy_region(5, 10, 77);
  const auto distinct = r.distinct_positions();
  std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 3)};
  const DesignSystem d = build_design(r, bases, /*include_re=*/false);
  const PenaltyStructure penalty(d);
  CHECK(d.n_coef() == 7);
  const FitResult f = fit(d, penalty, flatten_counts(r, r.meth_reads));
  CHECK(f.converged);
  CHECK_FALSE(f.include_re);
  CHECK(f.u().cwiseAbs().maxCoeff() == 0.0);
}
