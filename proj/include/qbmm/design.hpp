#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "qbmm/basis.hpp"
#include "qbmm/region_data.hpp"

namespace qbmm {

// Spanned design for one region: fixed-effect spline blocks (intercept curve
// plus one block per covariate, entries B_l(t_ij) * Z_pi with Z_0 == 1) and,
// when enabled, the subject random-intercept incidence block. Rows are
// ordered sample-major, within sample by position. Immutable once built.
struct DesignSystem {
  Eigen::MatrixXd Xb;                     // M x K fixed-effect block
  std::vector<int> row_sample;            // M, sample index of each row
  Eigen::VectorXd depth;                  // M, read depths X_ij
  Eigen::VectorXd position;               // M, t_ij per row
  std::vector<std::pair<int, int>> row_obs;  // (sample i, site j) per row
  std::vector<std::pair<int, int>> blocks;   // [begin, end) column range per smooth term
  std::vector<SplineBasis> bases;         // one per smooth term
  int n_samples = 0;
  bool include_re = true;

  int n_rows() const { return static_cast<int>(Xb.rows()); }
  int n_fixed() const { return static_cast<int>(Xb.cols()); }
  int n_terms() const { return static_cast<int>(blocks.size()); }
  int n_coef() const { return n_fixed() + (include_re ? n_samples : 0); }

  // eta = Xb * alpha + u[sample]
  Eigen::VectorXd linear_predictor(const Eigen::VectorXd& coef) const {
    Eigen::VectorXd eta = Xb * coef.head(n_fixed());
    if (include_re) {
      const auto u = coef.tail(n_samples);
      for (int l = 0; l < n_rows(); ++l) eta[l] += u[row_sample[l]];
    }
    return eta;
  }

  // X^T v for the full design [Xb, X1] without materializing X1.
  Eigen::VectorXd xt_product(const Eigen::VectorXd& v) const {
    Eigen::VectorXd out(n_coef());
    out.head(n_fixed()) = Xb.transpose() * v;
    if (include_re) {
      out.tail(n_samples).setZero();
      for (int l = 0; l < n_rows(); ++l) out[n_fixed() + row_sample[l]] += v[l];
    }
    return out;
  }

  // X^T diag(w) X, exploiting the 0/1 structure of the incidence block.
  Eigen::MatrixXd xtwx(const Eigen::VectorXd& w) const {
    const int K = n_fixed();
    const int C = n_coef();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(C, C);
    H.topLeftCorner(K, K).noalias() = Xb.transpose() * w.asDiagonal() * Xb;
    if (include_re) {
      for (int l = 0; l < n_rows(); ++l) {
        const int c = K + row_sample[l];
        H.block(0, c, K, 1).noalias() += w[l] * Xb.row(l).transpose();
        H(c, c) += w[l];
      }
      H.bottomLeftCorner(n_samples, K) = H.topRightCorner(K, n_samples).transpose();
    }
    return H;
  }

  // Dense [Xb, X1]; for oracles and small problems only.
  Eigen::MatrixXd full_matrix() const {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n_rows(), n_coef());
    X.leftCols(n_fixed()) = Xb;
    if (include_re)
      for (int l = 0; l < n_rows(); ++l) X(l, n_fixed() + row_sample[l]) = 1.0;
    return X;
  }
};

inline DesignSystem build_design(const RegionData& region, const std::vector<SplineBasis>& bases,
                                 bool include_re = true) {
  const int P = region.n_covariates();
  if (static_cast<int>(bases.size()) != P + 1)
    throw domain_error("need one basis per smooth term (intercept plus each covariate)");
  DesignSystem d;
  d.bases = bases;
  d.include_re = include_re;
  d.n_samples = region.n_samples();
  int K = 0;
  for (const auto& b : bases) {
    d.blocks.emplace_back(K, K + b.rank());
    K += b.rank();
  }
  const int M = region.n_obs();
  d.Xb.resize(M, K);
  d.row_sample.resize(M);
  d.depth.resize(M);
  d.position.resize(M);
  d.row_obs.reserve(M);
  int l = 0;
  for (int i = 0; i < region.n_samples(); ++i) {
    for (std::size_t j = 0; j < region.positions[i].size(); ++j, ++l) {
      const double t = region.positions[i][j];
      for (int p = 0; p <= P; ++p) {
        const double z = (p == 0) ? 1.0 : region.covariates(i, p - 1);
        const auto [a, b] = d.blocks[p];
        if (!d.bases[p].in_range(t))
          throw domain_error("position " + std::to_string(t) + " for sample " +
                             region.sample_ids[i] + " site " + std::to_string(j) +
                             " lies outside the basis range");
        if (z == 0.0)
          d.Xb.block(l, a, 1, b - a).setZero();
        else
          d.Xb.block(l, a, 1, b - a) = z * d.bases[p].eval(t);
      }
      d.row_sample[l] = i;
      d.depth[l] = region.total_reads[i][j];
      d.position[l] = t;
      d.row_obs.emplace_back(i, static_cast<int>(j));
    }
  }
  return d;
}

// Flattens per-sample counts in design row order.
inline Eigen::VectorXd flatten_counts(const RegionData& region,
                                      const std::vector<std::vector<int>>& counts) {
  Eigen::VectorXd v(region.n_obs());
  int l = 0;
  for (int i = 0; i < region.n_samples(); ++i)
    for (std::size_t j = 0; j < region.positions[i].size(); ++j, ++l) v[l] = counts[i][j];
  return v;
}

}  // namespace qbmm
