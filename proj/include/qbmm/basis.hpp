#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "qbmm/common.hpp"

namespace qbmm {

// Cubic regression spline basis of rank L with knots at quantiles of the
// observed distinct positions. Basis function l is the C2 interpolating
// natural cubic spline through the cardinal values e_l at the knots, so a
// coefficient vector holds the curve values at the knots. Positions are
// mapped affinely onto [0, 1] internally; all evaluation and the penalty
// live on that scale, which the smoothing parameters absorb.
class SplineBasis {
public:
  SplineBasis() = default;

  // knots: strictly increasing, on the original position scale.
  SplineBasis(std::vector<double> knots, double range_lo, double range_hi)
      : knots_raw_(std::move(knots)), lo_(range_lo), hi_(range_hi) {
    const int L = rank();
    if (L < 3) throw domain_error("spline basis needs at least 3 knots");
    if (!(lo_ < hi_)) throw domain_error("degenerate position range");
    knots_.resize(L);
    for (int l = 0; l < L; ++l) {
      knots_[l] = to_unit(knots_raw_[l]);
      if (l > 0 && knots_[l] <= knots_[l - 1])
        throw domain_error("knots must be strictly increasing");
    }
    build_curvature_map();
  }

  int rank() const { return static_cast<int>(knots_raw_.size()); }
  const std::vector<double>& knots() const { return knots_raw_; }
  double range_lo() const { return lo_; }
  double range_hi() const { return hi_; }

  bool in_range(double t) const {
    const double tol = 1e-9 * (hi_ - lo_);
    return t >= lo_ - tol && t <= hi_ + tol;
  }

  // Row of basis values (B_1(t), ..., B_L(t)).
  Eigen::RowVectorXd eval(double t) const { return eval_impl(t, 0); }

  // Second derivatives on the internal unit scale, matching penalty units.
  Eigen::RowVectorXd eval_second_derivative(double t) const { return eval_impl(t, 2); }

  Eigen::MatrixXd eval_matrix(const std::vector<double>& ts) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(ts.size()), rank());
    for (std::size_t i = 0; i < ts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = eval(ts[i]);
    return out;
  }

  // Exact integral of products of second derivatives. Curvature is linear
  // between knots, so the quadratic form reduces to D^T B^{-1} D from the
  // banded natural-spline system.
  Eigen::MatrixXd penalty() const {
    return D_.transpose() * bandB_.ldlt().solve(D_);
  }

private:
  double to_unit(double t) const { return (t - lo_) / (hi_ - lo_); }

  void build_curvature_map() {
    const int L = rank();
    Eigen::VectorXd h(L - 1);
    for (int j = 0; j < L - 1; ++j) h[j] = knots_[j + 1] - knots_[j];
    D_ = Eigen::MatrixXd::Zero(L - 2, L);
    bandB_ = Eigen::MatrixXd::Zero(L - 2, L - 2);
    for (int i = 0; i < L - 2; ++i) {
      D_(i, i) = 1.0 / h[i];
      D_(i, i + 1) = -1.0 / h[i] - 1.0 / h[i + 1];
      D_(i, i + 2) = 1.0 / h[i + 1];
      bandB_(i, i) = (h[i] + h[i + 1]) / 3.0;
      if (i + 1 < L - 2) {
        bandB_(i, i + 1) = h[i + 1] / 6.0;
        bandB_(i + 1, i) = h[i + 1] / 6.0;
      }
    }
    // gamma = G y gives interior curvatures of the interpolant (natural end
    // conditions: zero curvature at the boundary knots).
    G_ = bandB_.ldlt().solve(D_);
    h_ = h;
  }

  Eigen::RowVectorXd eval_impl(double t, int deriv) const {
    if (!in_range(t))
      throw domain_error("position " + std::to_string(t) + " outside basis range [" +
                         std::to_string(lo_) + ", " + std::to_string(hi_) + "]");
    const double u = std::clamp(to_unit(t), 0.0, 1.0);
    const int L = rank();
    int j = static_cast<int>(std::upper_bound(knots_.begin(), knots_.end(), u) - knots_.begin()) - 1;
    j = std::clamp(j, 0, L - 2);
    const double hj = h_[j];
    const double dl = u - knots_[j];        // distance to left knot
    const double dr = knots_[j + 1] - u;    // distance to right knot
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(L);
    // value = linear part in knot values + curvature part; curvature gamma of
    // basis l is column l of G_ padded with zero end conditions.
    auto gamma = [&](int interior, int l) -> double {
      if (interior < 0 || interior >= L - 2) return 0.0;
      return G_(interior, l);
    };
    for (int l = 0; l < L; ++l) {
      const double gj = gamma(j - 1, l);
      const double gj1 = gamma(j, l);
      if (deriv == 0) {
        double v = 0.0;
        if (l == j) v += dr / hj;
        if (l == j + 1) v += dl / hj;
        v -= dl * dr / 6.0 * ((1.0 + dr / hj) * gj + (1.0 + dl / hj) * gj1);
        row[l] = v;
      } else {
        // curvature interpolates linearly between knots
        row[l] = (gj * dr + gj1 * dl) / hj;
      }
    }
    return row;
  }

  std::vector<double> knots_raw_;
  std::vector<double> knots_;   // unit scale
  Eigen::VectorXd h_;
  Eigen::MatrixXd D_, bandB_, G_;
  double lo_ = 0.0, hi_ = 1.0;
};

struct PenaltyBlock {
  Eigen::MatrixXd matrix;   // L x L, symmetric PSD, null space = linear curves
};

// Type-7 quantiles of the sorted distinct values at L evenly spaced
// probabilities; strictly increasing whenever L <= number of distinct values.
inline std::vector<double> quantile_knots(const std::vector<double>& sorted_distinct, int L) {
  const int n = static_cast<int>(sorted_distinct.size());
  std::vector<double> knots(L);
  for (int l = 0; l < L; ++l) {
    const double idx = static_cast<double>(l) / (L - 1) * (n - 1);
    const int base = static_cast<int>(std::floor(idx));
    const double frac = idx - base;
    knots[l] = (base + 1 < n) ? (1.0 - frac) * sorted_distinct[base] + frac * sorted_distinct[base + 1]
                              : sorted_distinct[n - 1];
  }
  return knots;
}

inline SplineBasis build_basis(const std::vector<double>& positions, int L) {
  if (L < 3) throw domain_error("basis rank below cubic minimum of 3");
  std::vector<double> distinct(positions);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<int>(distinct.size()) < L)
    throw domain_error("rank " + std::to_string(L) + " exceeds the " +
                       std::to_string(distinct.size()) +
                       " distinct positions; choose a smaller rank");
  return SplineBasis(quantile_knots(distinct, L), distinct.front(), distinct.back());
}

inline PenaltyBlock penalty_matrix(const SplineBasis& basis) {
  return PenaltyBlock{basis.penalty()};
}

}  // namespace qbmm
