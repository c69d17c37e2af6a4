#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "qbmm/basis.hpp"
#include "qbmm/design.hpp"
#include "test_util.hpp"

using namespace qbmm;
using Catch::Approx;

namespace {

std::vector<double> equally_spaced(int n, double lo = 0.0, double hi = 1000.0) {
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = lo + (hi - lo) * i / (n - 1);
  return x;
}

// Trapezoid quadrature of (sum_l alpha_l B_l''(t))^2 on the basis's unit scale.
double curvature_quadrature(const SplineBasis& basis, const Eigen::VectorXd& alpha, int n_grid) {
  const double lo = basis.range_lo(), hi = basis.range_hi();
  double acc = 0.0;
  double prev = 0.0;
  for (int i = 0; i <= n_grid; ++i) {
    const double t = lo + (hi - lo) * i / n_grid;
    const double c = basis.eval_second_derivative(t).dot(alpha);
    const double v = c * c;
    if (i > 0) acc += 0.5 * (prev + v) / n_grid;   // du = 1/n on the unit scale
    prev = v;
  }
  return acc;
}

}  // namespace

TEST_CASE("quantile knots at evenly spaced percentiles", "[basis]") {
  const auto pos = equally_spaced(123);
  const SplineBasis b = build_basis(pos, 5);
  REQUIRE(b.rank() == 5);
  const auto& knots = b.knots();
  CHECK(knots.front() == Approx(pos.front()));
  CHECK(knots.back() == Approx(pos.back()));
  CHECK(knots[2] == Approx(500.0).margin(1e-9));
  for (double k : knots) {
    const auto row = b.eval(k);
    REQUIRE(row.allFinite());
  }
}

TEST_CASE("basis functions are cardinal at the knots", "[basis]") {
  const SplineBasis b = build_basis(equally_spaced(40), 6);
  for (int l = 0; l < b.rank(); ++l) {
    const auto row = b.eval(b.knots()[l]);
    for (int k = 0; k < b.rank(); ++k)
      CHECK(row[k] == Approx(k == l ? 1.0 : 0.0).margin(1e-10));
  }
}

TEST_CASE("too few distinct positions is an error", "[basis]") {
  CHECK_THROWS_AS(build_basis({1.0, 2.0, 3.0, 4.0}, 5), domain_error);
  CHECK_THROWS_AS(build_basis({1.0, 1.0, 2.0, 2.0, 3.0, 4.0}, 5), domain_error);
}

TEST_CASE("evaluation outside the range is an error", "[basis]") {
  const SplineBasis b = build_basis(equally_spaced(20), 4);
  CHECK_THROWS_AS(b.eval(-5.0), domain_error);
  CHECK_THROWS_AS(b.eval(1000.5), domain_error);
}

TEST_CASE("penalty annihilates constants and linear curves", "[basis]") {
  const SplineBasis b = build_basis(equally_spaced(30), 6);
  const Eigen::MatrixXd A = penalty_matrix(b).matrix;
  CHECK((A - A.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  // coefficients are knot values, so constant and linear curves are easy
  Eigen::VectorXd c = Eigen::VectorXd::Constant(6, 2.5);
  CHECK(std::abs(c.dot(A * c)) < 1e-10);
  Eigen::VectorXd lin(6);
  for (int l = 0; l < 6; ++l) lin[l] = 0.3 + 1.7 * b.knots()[l];
  CHECK(std::abs(lin.dot(A * lin)) < 1e-6 * lin.squaredNorm());
}

TEST_CASE("penalty rank is L - 2 with nonnegative spectrum", "[basis]") {
  for (int L : {4, 5, 8}) {
    const SplineBasis b = build_basis(equally_spaced(40), L);
    const Eigen::MatrixXd A = penalty_matrix(b).matrix;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A);
    const double emax = eig.eigenvalues().maxCoeff();
    CHECK(eig.eigenvalues().minCoeff() > -1e-10 * emax);
    int rank = 0;
    for (int k = 0; k < L; ++k)
      if (eig.eigenvalues()[k] > 1e-10 * emax) ++rank;
    CHECK(rank == L - 2);
  }
}

TEST_CASE("penalty quadratic form matches curvature quadrature", "[basis]") {
  const SplineBasis b = build_basis(equally_spaced(60, 0.0, 500.0), 7);
  const Eigen::MatrixXd A = penalty_matrix(b).matrix;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::VectorXd alpha(7);
    for (int l = 0; l < 7; ++l) alpha[l] = gauss(rng);
    const double exact = alpha.dot(A * alpha);
    const double quad = curvature_quadrature(b, alpha, 200000);
    CHECK(quad == Approx(exact).epsilon(1e-6));
  }
}

TEST_CASE("penalty quadratic form ignores observation order", "[basis]") {
  auto pos = equally_spaced(50);
  auto shuffled = pos;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(3));
  const Eigen::MatrixXd A1 = penalty_matrix(build_basis(pos, 6)).matrix;
  const Eigen::MatrixXd A2 = penalty_matrix(build_basis(shuffled, 6)).matrix;
  CHECK((A1 - A2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("design has the spanned shape with RE incidence", "[basis]") {
  SECTION("one sample, one site, intercept only") {
    RegionData r;
    r.sample_ids = {"s1"};
    r.positions = {{100.0, 150.0, 200.0}};
    r.total_reads = {{10, 10, 10}};
    r.meth_reads = {{5, 4, 3}};
    r.covariates.resize(1, 0);
    const auto bases = std::vector<SplineBasis>{build_basis({100.0, 150.0, 200.0}, 3)};
    const DesignSystem d = build_design(r, bases);
    CHECK(d.n_rows() == 3);
    CHECK(d.n_coef() == 3 + 1);
    const Eigen::MatrixXd X = d.full_matrix();
    CHECK(X(0, 3) == 1.0);
    for (int l = 0; l < 3; ++l) {
      double ones = 0;
      for (int c = 3; c < 4; ++c) ones += X(l, c);
      CHECK(ones == 1.0);
    }
  }
  SECTION("zero covariate zeroes the block") {
    RegionData r = test::toy_region(4, 10);
    r.covariates.setZero();
    const auto distinct = r.distinct_positions();
    std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 4)};
    const DesignSystem d = build_design(r, bases);
    CHECK(d.Xb.middleCols(4, 4).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("scenario-1 scale shape") {
    // N=100 samples, 123 sites, P=3, L=5 -> 12300 x (20 + 100)
    RegionData r;
    const int N = 100, m = 123;
    r.covariates.resize(N, 3);
    r.covariate_names = {"Z1", "Z2", "Z3"};
    std::vector<double> pos = equally_spaced(m);
    std::mt19937_64 rng(5);
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < N; ++i) {
      r.sample_ids.push_back("s" + std::to_string(i));
      r.positions.push_back(pos);
      r.total_reads.emplace_back(m, 10);
      r.meth_reads.emplace_back(m, 3);
      for (int p = 0; p < 3; ++p) r.covariates(i, p) = coin(rng) ? 1.0 : 0.0;
    }
    std::vector<SplineBasis> bases;
    for (int p = 0; p < 4; ++p) bases.push_back(build_basis(pos, 5));
    const DesignSystem d = build_design(r, bases);
    CHECK(d.n_rows() == 12300);
    CHECK(d.n_coef() == 120);
  }
}

TEST_CASE("curve reconstruction through the design equals basis evaluation", "[basis]") {
  const RegionData r = test::toy_region(3, 12);
  const auto distinct = r.distinct_positions();
  std::vector<SplineBasis> bases{build_basis(distinct, 5), build_basis(distinct, 4)};
  const DesignSystem d = build_design(r, bases);
  Eigen::VectorXd alpha0(5);
  alpha0 << 0.3, -0.1, 0.8, 0.2, -0.5;
  Eigen::VectorXd coef = Eigen::VectorXd::Zero(d.n_coef());
  coef.head(5) = alpha0;
  const Eigen::VectorXd eta = d.linear_predictor(coef);
  for (int l = 0; l < d.n_rows(); ++l)
    CHECK(eta[l] == Approx(bases[0].eval(d.position[l]).dot(alpha0)).margin(1e-12));
}

TEST_CASE("xtwx matches the dense computation", "[basis]") {
  const RegionData r = test::toy_region(5, 9);
  const auto distinct = r.distinct_positions();
  std::vector<SplineBasis> bases{build_basis(distinct, 4), build_basis(distinct, 3)};
  const DesignSystem d = build_design(r, bases);
  Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(d.n_rows(), 0.5, 2.0);
  const Eigen::MatrixXd X = d.full_matrix();
  const Eigen::MatrixXd dense = X.transpose() * w.asDiagonal() * X;
  CHECK((d.xtwx(w) - dense).cwiseAbs().maxCoeff() < 1e-10);
  Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(d.n_rows(), -1.0, 1.0);
  CHECK((d.xt_product(v) - X.transpose() * v).cwiseAbs().maxCoeff() < 1e-10);
}
