#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "qbmm/design.hpp"

namespace qbmm {

// Covariance-structure parameters Theta: one smoothing weight per term and
// the random-intercept variance. The penalty matrix built from them is the
// dispersion-factored Sigma, so coefficient estimates given Theta do not
// depend on phi (phi scales the whole quasi-score).
struct VarianceComponents {
  Eigen::VectorXd lambda;   // per smooth term, > 0
  double sigma0_sq = 1.0;   // >= 0; values below 1e-8 mean the RE is profiled out

  void validate(int n_terms, bool include_re) const {
    if (lambda.size() != n_terms) throw domain_error("lambda count != smooth term count");
    for (int p = 0; p < lambda.size(); ++p)
      if (!(lambda[p] > 0)) throw domain_error("smoothing parameters must be positive");
    if (include_re && !(sigma0_sq >= kSigmaFloor))
      throw domain_error("sigma0_sq below boundary; fit the multiplicative-only submodel instead");
  }

  static constexpr double kSigmaFloor = 1e-8;
};

struct Dispersion {
  double phi = 1.0;
  void validate() const {
    if (!(phi > 0)) throw domain_error("dispersion must be positive");
  }
};

// Penalty blocks with their eigenstructure, cached once per design. Provides
// Sigma(theta), its generalized log-determinant and rank.
class PenaltyStructure {
public:
  PenaltyStructure() = default;

  explicit PenaltyStructure(const DesignSystem& design) {
    include_re_ = design.include_re;
    n_samples_ = design.n_samples;
    blocks_ = design.blocks;
    n_fixed_ = design.n_fixed();
    for (const auto& basis : design.bases) add_block(basis.penalty());
  }

  // Explicit penalty blocks, for designs not built from spline bases.
  PenaltyStructure(std::vector<Eigen::MatrixXd> blocks, std::vector<std::pair<int, int>> ranges,
                   int n_fixed, int n_samples, bool include_re)
      : blocks_(std::move(ranges)),
        n_fixed_(n_fixed),
        n_samples_(n_samples),
        include_re_(include_re) {
    for (auto& A : blocks) add_block(std::move(A));
  }

  int n_terms() const { return static_cast<int>(A_.size()); }
  int n_fixed() const { return n_fixed_; }
  int n_coef() const { return n_fixed_ + (include_re_ ? n_samples_ : 0); }
  bool include_re() const { return include_re_; }
  int n_samples() const { return n_samples_; }
  const Eigen::MatrixXd& block(int p) const { return A_[p]; }
  int block_rank(int p) const { return rank_[p]; }
  const std::pair<int, int>& block_range(int p) const { return blocks_[p]; }

  int rank(const VarianceComponents&) const {
    int r = 0;
    for (int rp : rank_) r += rp;
    return r + (include_re_ ? n_samples_ : 0);
  }

  // Dimension of the unpenalized subspace: two per smooth term.
  int null_dim() const {
    int n0 = 0;
    for (std::size_t p = 0; p < A_.size(); ++p)
      n0 += static_cast<int>(A_[p].rows()) - rank_[p];
    return n0;
  }

  Eigen::MatrixXd sigma(const VarianceComponents& theta) const {
    theta.validate(n_terms(), include_re_);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n_coef(), n_coef());
    for (int p = 0; p < n_terms(); ++p) {
      const auto [a, b] = blocks_[p];
      S.block(a, a, b - a, b - a) = theta.lambda[p] * A_[p];
    }
    if (include_re_)
      S.bottomRightCorner(n_samples_, n_samples_) =
          (1.0 / theta.sigma0_sq) * Eigen::MatrixXd::Identity(n_samples_, n_samples_);
    return S;
  }

  Eigen::VectorXd sigma_product(const VarianceComponents& theta, const Eigen::VectorXd& B) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(B.size());
    for (int p = 0; p < n_terms(); ++p) {
      const auto [a, b] = blocks_[p];
      out.segment(a, b - a).noalias() = theta.lambda[p] * (A_[p] * B.segment(a, b - a));
    }
    if (include_re_) out.tail(n_samples_) = B.tail(n_samples_) / theta.sigma0_sq;
    return out;
  }

  double quad_form(const VarianceComponents& theta, const Eigen::VectorXd& B) const {
    return B.dot(sigma_product(theta, B));
  }

  double logdet_plus(const VarianceComponents& theta) const {
    double v = 0.0;
    for (int p = 0; p < n_terms(); ++p)
      v += rank_[p] * std::log(theta.lambda[p]) + logdet_plus_[p];
    if (include_re_) v -= n_samples_ * std::log(theta.sigma0_sq);
    return v;
  }

private:
  void add_block(Eigen::MatrixXd A) {
    A = 0.5 * (A + A.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A);
    const double emax = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    const double cutoff = 1e-10 * emax;   // stable rank detection
    int rank = 0;
    double logdet = 0.0;
    for (int k = 0; k < eig.eigenvalues().size(); ++k) {
      if (emax > 0.0 && eig.eigenvalues()[k] > cutoff) {
        ++rank;
        logdet += std::log(eig.eigenvalues()[k]);
      }
    }
    A_.push_back(std::move(A));
    rank_.push_back(rank);
    logdet_plus_.push_back(logdet);
  }

  std::vector<Eigen::MatrixXd> A_;
  std::vector<int> rank_;
  std::vector<double> logdet_plus_;
  std::vector<std::pair<int, int>> blocks_;
  int n_fixed_ = 0;
  int n_samples_ = 0;
  bool include_re_ = true;
};

// Quasi-deviance of one observation under the binomial variance function,
// -2 * integral from S/X to pi of (S - X p) / (p (1 - p)) dp, with the
// 0 log 0 = 0 convention. S may be non-integer (E-step expectations).
inline double quasi_deviance(double S, double X, double pi) {
  if (!(pi > 0.0 && pi < 1.0)) throw domain_error("quasi_deviance: pi must lie in (0,1)");
  if (S < 0.0 || S > X) throw domain_error("quasi_deviance: S outside [0, X]");
  const double p = clamp_prob(pi);
  double d = 0.0;
  if (S > 0.0) d += S * std::log(S / (X * p));
  if (S < X) d += (X - S) * std::log((X - S) / (X - X * p));
  return 2.0 * d;
}

inline Eigen::VectorXd mean_probabilities(const DesignSystem& design, const Eigen::VectorXd& coef) {
  Eigen::VectorXd eta = design.linear_predictor(coef);
  Eigen::VectorXd pi(eta.size());
  for (int l = 0; l < eta.size(); ++l) {
    if (!std::isfinite(eta[l])) throw numeric_error("non-finite linear predictor");
    pi[l] = clamp_prob(expit(eta[l]));
  }
  return pi;
}

inline double deviance_sum(const Eigen::VectorXd& S, const Eigen::VectorXd& depth,
                           const Eigen::VectorXd& pi) {
  double d = 0.0;
  for (int l = 0; l < S.size(); ++l) d += quasi_deviance(S[l], depth[l], pi[l]);
  return d;
}

// Diagonal of W: X_ij pi (1 - pi).
inline Eigen::VectorXd weight_vector(const DesignSystem& design, const Eigen::VectorXd& pi) {
  return design.depth.array() * pi.array() * (1.0 - pi.array());
}

// Penalized quasi-score U(B) = (1/phi) { X^T (S - Lambda_X pi) - Sigma B }.
inline Eigen::VectorXd quasi_score(const Eigen::VectorXd& coef, const DesignSystem& design,
                                   const PenaltyStructure& penalty, const Eigen::VectorXd& S,
                                   const VarianceComponents& theta, const Dispersion& phi) {
  phi.validate();
  const Eigen::VectorXd pi = mean_probabilities(design, coef);
  const Eigen::VectorXd resid = S - design.depth.cwiseProduct(pi);
  return (design.xt_product(resid) - penalty.sigma_product(theta, coef)) / phi.phi;
}

// Negated score gradient (X^T W X + Sigma) / phi; positive definite for
// interior theta.
inline Eigen::MatrixXd score_hessian(const Eigen::VectorXd& coef, const DesignSystem& design,
                                     const PenaltyStructure& penalty,
                                     const VarianceComponents& theta, const Dispersion& phi) {
  phi.validate();
  const Eigen::VectorXd pi = mean_probabilities(design, coef);
  Eigen::MatrixXd H = design.xtwx(weight_vector(design, pi));
  H += penalty.sigma(theta);
  return H / phi.phi;
}

// Log Laplace-approximated marginal quasi-likelihood at the inner optimum:
//   -(M/2) log phi - sum d_ij / (2 phi) - B^T Sigma B / (2 phi)
//   + (1/2) log |Sigma/phi|_+ - (1/2) log |(X^T W X + Sigma)/phi| .
inline double laplace_objective(const Eigen::VectorXd& B_hat, const DesignSystem& design,
                                const PenaltyStructure& penalty, const Eigen::VectorXd& S,
                                const VarianceComponents& theta, const Dispersion& phi) {
  phi.validate();
  const double M = static_cast<double>(design.n_rows());
  const Eigen::VectorXd pi = mean_probabilities(design, B_hat);
  const double dev = deviance_sum(S, design.depth, pi);
  const double quad = penalty.quad_form(theta, B_hat);
  Eigen::MatrixXd H = design.xtwx(weight_vector(design, pi)) + penalty.sigma(theta);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
    throw numeric_error("indefinite penalized Hessian: inner solve has not converged");
  const double logdet_H = ldlt.vectorD().array().log().sum();
  const int C = penalty.n_coef();
  const int r = penalty.rank(theta);
  const double lp = std::log(phi.phi);
  return -0.5 * M * lp - (dev + quad) / (2.0 * phi.phi) +
         0.5 * (penalty.logdet_plus(theta) - r * lp) - 0.5 * (logdet_H - C * lp);
}

}  // namespace qbmm
