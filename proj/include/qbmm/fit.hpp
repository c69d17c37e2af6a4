#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "qbmm/quasi_likelihood.hpp"

namespace qbmm {

struct InnerResult {
  Eigen::VectorXd coef;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;
};

namespace detail {

// Penalized objective maximized by the inner solve; phi factors out.
inline double penalized_objective(const DesignSystem& design, const PenaltyStructure& penalty,
                                  const Eigen::VectorXd& S, const VarianceComponents& theta,
                                  const Eigen::VectorXd& coef) {
  const Eigen::VectorXd pi = mean_probabilities(design, coef);
  return -0.5 * (deviance_sum(S, design.depth, pi) + penalty.quad_form(theta, coef));
}

inline InnerResult inner_newton(const DesignSystem& design, const PenaltyStructure& penalty,
                                const Eigen::VectorXd& S, const VarianceComponents& theta,
                                const Eigen::VectorXd& B_init, double tol, int max_iter) {
  InnerResult res;
  res.coef = B_init;
  const double score_tol = tol * (1.0 + S.cwiseAbs().maxCoeff());
  const Eigen::MatrixXd sigma = penalty.sigma(theta);
  double obj = penalized_objective(design, penalty, S, theta, res.coef);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd pi = mean_probabilities(design, res.coef);
    const Eigen::VectorXd score =
        design.xt_product(S - design.depth.cwiseProduct(pi)) - penalty.sigma_product(theta, res.coef);
    res.score_norm = score.lpNorm<Eigen::Infinity>();
    if (res.score_norm < score_tol) {
      res.converged = true;
      return res;
    }
    Eigen::MatrixXd H = design.xtwx(weight_vector(design, pi)) + sigma;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success) return res;
    const Eigen::VectorXd delta = ldlt.solve(score);
    double step = 1.0;
    bool accepted = false;
    for (int half = 0; half < 30; ++half, step *= 0.5) {
      const Eigen::VectorXd trial = res.coef + step * delta;
      const double trial_obj = penalized_objective(design, penalty, S, theta, trial);
      if (std::isfinite(trial_obj) && trial_obj >= obj - 1e-12 * (1.0 + std::abs(obj))) {
        res.coef = trial;
        obj = trial_obj;
        accepted = true;
        break;
      }
    }
    ++res.iterations;
    if (!accepted) return res;   // stuck at numerical precision
  }
  // out of iterations; caller decides whether that is fatal
  const Eigen::VectorXd pi = mean_probabilities(design, res.coef);
  const Eigen::VectorXd score =
      design.xt_product(S - design.depth.cwiseProduct(pi)) - penalty.sigma_product(theta, res.coef);
  res.score_norm = score.lpNorm<Eigen::Infinity>();
  res.converged = res.score_norm < score_tol;
  return res;
}

}  // namespace detail

// Solves the penalized quasi-score equation for the coefficients given Theta.
// The solution does not depend on phi; phi only rescales the score, so the
// convergence tolerance is tightened for phi < 1 to keep U below tol.
inline InnerResult inner_solve(const DesignSystem& design, const PenaltyStructure& penalty,
                               const Eigen::VectorXd& S, const VarianceComponents& theta,
                               const Dispersion& phi, const Eigen::VectorXd& B_init,
                               double tol = 1e-8, int max_iter = 200) {
  phi.validate();
  InnerResult res = detail::inner_newton(design, penalty, S, theta, B_init,
                                         tol * std::min(1.0, phi.phi), max_iter);
  if (!res.converged)
    throw convergence_error("inner solve did not converge: score norm " +
                            std::to_string(res.score_norm) + " after " +
                            std::to_string(res.iterations) + " iterations");
  return res;
}

struct Edf {
  double total = 0.0;
  Eigen::VectorXd per_term;   // sum of diag(2F - FF) over each smooth block
};

inline Edf edf(const PenaltyStructure& penalty, const Eigen::MatrixXd& xtwx,
               const Eigen::MatrixXd& hessian) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian);
  if (ldlt.info() != Eigen::Success) throw numeric_error("edf: indefinite Hessian");
  const Eigen::MatrixXd F = ldlt.solve(xtwx);
  Edf out;
  out.total = F.trace();
  const Eigen::VectorXd diag2F = 2.0 * F.diagonal();
  const Eigen::VectorXd diagFF = (F.array() * F.transpose().array()).rowwise().sum();
  out.per_term.resize(penalty.n_terms());
  for (int p = 0; p < penalty.n_terms(); ++p) {
    const auto [a, b] = penalty.block_range(p);
    out.per_term[p] = (diag2F - diagFF).segment(a, b - a).sum();
  }
  return out;
}

struct FletcherPhi {
  double pearson = 0.0;
  double abar = 0.0;
  double fletcher = 0.0;
  bool floored = false;

  static constexpr double kFloor = 0.05;   // keeps F denominators finite on degenerate regions
};

inline FletcherPhi fletcher_phi(const Eigen::VectorXd& S, const Eigen::VectorXd& depth,
                                const Eigen::VectorXd& pi, double tau) {
  const double M = static_cast<double>(S.size());
  if (!(tau < M)) throw domain_error("fletcher_phi: effective df must be below observation count");
  double pearson = 0.0, abar = 0.0;
  for (int l = 0; l < S.size(); ++l) {
    const double p = clamp_prob(pi[l]);
    const double v = depth[l] * p * (1.0 - p);
    const double r = S[l] - depth[l] * p;
    pearson += r * r / v;
    abar += (1.0 - 2.0 * p) / v * r;
  }
  FletcherPhi out;
  out.pearson = pearson / (M - tau);
  out.abar = abar / M;
  if (1.0 + out.abar <= 0.0)
    throw numeric_error("fletcher_phi: 1 + abar <= 0 signals severe misfit");
  out.fletcher = out.pearson / (1.0 + out.abar);
  if (out.fletcher < FletcherPhi::kFloor) {
    out.fletcher = FletcherPhi::kFloor;
    out.floored = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outer iteration over rho = (log lambda_0..P [, log sigma0^2], log phi)
// ---------------------------------------------------------------------------

namespace detail {

struct RhoLayout {
  int n_lambda = 0;
  bool has_sigma = false;
  int size() const { return n_lambda + (has_sigma ? 1 : 0) + 1; }
  int sigma_index() const { return n_lambda; }
  int phi_index() const { return n_lambda + (has_sigma ? 1 : 0); }

  VarianceComponents theta(const Eigen::VectorXd& rho) const {
    VarianceComponents t;
    t.lambda = rho.head(n_lambda).array().exp();
    t.sigma0_sq = has_sigma ? std::exp(rho[sigma_index()]) : 0.0;
    return t;
  }
  double phi(const Eigen::VectorXd& rho) const { return std::exp(rho[phi_index()]); }

  Eigen::VectorXd lower() const {
    Eigen::VectorXd lo(size());
    lo.head(n_lambda).setConstant(std::log(1e-10));
    if (has_sigma) lo[sigma_index()] = std::log(VarianceComponents::kSigmaFloor);
    lo[phi_index()] = std::log(1e-3);
    return lo;
  }
  Eigen::VectorXd upper() const {
    Eigen::VectorXd hi(size());
    hi.head(n_lambda).setConstant(std::log(1e10));
    if (has_sigma) hi[sigma_index()] = std::log(1e6);
    hi[phi_index()] = std::log(1e3);
    return hi;
  }
};

}  // namespace detail

// Exact gradient of the Laplace objective in (log Theta, log phi), using the
// implicit dependence of the inner solution on Theta:
//   dB/d theta_k = -H^{-1} (dSigma/d theta_k) B .
// The weight matrix moves with B, which feeds the log|H| term.
inline Eigen::VectorXd laplace_gradient(const Eigen::VectorXd& B_hat, const DesignSystem& design,
                                        const PenaltyStructure& penalty, const Eigen::VectorXd& S,
                                        const VarianceComponents& theta, const Dispersion& phi) {
  const int K = design.n_fixed();
  const int C = penalty.n_coef();
  const int M = design.n_rows();
  const int P1 = penalty.n_terms();
  const bool re = penalty.include_re();
  const double ph = phi.phi;

  const Eigen::VectorXd pi = mean_probabilities(design, B_hat);
  const Eigen::VectorXd w = weight_vector(design, pi);
  Eigen::VectorXd wdot(M);
  for (int l = 0; l < M; ++l) wdot[l] = w[l] * (1.0 - 2.0 * pi[l]);

  const Eigen::MatrixXd H = design.xtwx(w) + penalty.sigma(theta);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() != Eigen::Success) throw numeric_error("laplace_gradient: indefinite Hessian");
  const Eigen::MatrixXd Hinv = ldlt.solve(Eigen::MatrixXd::Identity(C, C));

  // Row-wise quadratic forms q_l = x_l^T H^{-1} x_l without forming X.
  Eigen::VectorXd q(M);
  {
    const Eigen::MatrixXd XbHbb = design.Xb * Hinv.topLeftCorner(K, K);
    Eigen::VectorXd q1 = (XbHbb.array() * design.Xb.array()).rowwise().sum();
    if (re) {
      const Eigen::MatrixXd XbHbr = design.Xb * Hinv.topRightCorner(K, penalty.n_samples());
      for (int l = 0; l < M; ++l) {
        const int s = design.row_sample[l];
        q[l] = q1[l] + 2.0 * XbHbr(l, s) + Hinv(K + s, K + s);
      }
    } else {
      q = q1;
    }
  }

  const double dev = deviance_sum(S, design.depth, pi);
  const double quad = penalty.quad_form(theta, B_hat);

  detail::RhoLayout layout{P1, re};
  Eigen::VectorXd grad(layout.size());

  auto theta_component = [&](const Eigen::VectorXd& sk, double ldet_term, double tr_sigma) {
    const Eigen::VectorXd v = -ldlt.solve(sk);
    Eigen::VectorXd xv = design.Xb * v.head(K);
    if (re)
      for (int l = 0; l < M; ++l) xv[l] += v[K + design.row_sample[l]];
    const double t1 = (wdot.array() * xv.array() * q.array()).sum();
    const double direct = -B_hat.dot(sk) / (2.0 * ph);
    return direct + ldet_term - 0.5 * (t1 + tr_sigma);
  };

  for (int p = 0; p < P1; ++p) {
    const auto [a, b] = penalty.block_range(p);
    Eigen::VectorXd sk = Eigen::VectorXd::Zero(C);
    sk.segment(a, b - a) = theta.lambda[p] * (penalty.block(p) * B_hat.segment(a, b - a));
    const double tr_sigma =
        theta.lambda[p] * (Hinv.block(a, a, b - a, b - a).array() * penalty.block(p).array()).sum();
    grad[p] = theta_component(sk, 0.5 * penalty.block_rank(p), tr_sigma);
  }
  if (re) {
    const int N = penalty.n_samples();
    Eigen::VectorXd sk = Eigen::VectorXd::Zero(C);
    sk.tail(N) = -B_hat.tail(N) / theta.sigma0_sq;
    const double tr_sigma = -Hinv.bottomRightCorner(N, N).trace() / theta.sigma0_sq;
    grad[layout.sigma_index()] = theta_component(sk, -0.5 * N, tr_sigma);
  }
  grad[layout.phi_index()] =
      -0.5 * M + (dev + quad) / (2.0 * ph) - 0.5 * penalty.rank(theta) + 0.5 * C;
  return grad;
}

struct OuterOptions {
  double inner_tol = 1e-9;
  int max_inner_iter = 200;
  double max_step = 2.0;        // per-component cap in log scale
  int max_halvings = 30;
  bool fix_phi = false;         // ES solve step holds phi at the plug-in value
  double stationary_tol = 1e-8;
};

struct OuterState {
  Eigen::VectorXd rho;
  Eigen::VectorXd B;
  double objective = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hess_inv;     // BFGS approximation, minimization convention
  bool have_curvature = false;
  int inner_iterations = 0;

  detail::RhoLayout layout;

  VarianceComponents theta() const { return layout.theta(rho); }
  Dispersion phi() const { return {layout.phi(rho)}; }
};

inline OuterState make_outer_state(const DesignSystem& design, const PenaltyStructure& penalty,
                                   const Eigen::VectorXd& S, const VarianceComponents& theta0,
                                   double phi0, const OuterOptions& opts) {
  OuterState st;
  st.layout = detail::RhoLayout{penalty.n_terms(), penalty.include_re()};
  st.rho.resize(st.layout.size());
  st.rho.head(st.layout.n_lambda) = theta0.lambda.array().log();
  if (st.layout.has_sigma) st.rho[st.layout.sigma_index()] = std::log(theta0.sigma0_sq);
  st.rho[st.layout.phi_index()] = std::log(phi0);
  InnerResult inner = detail::inner_newton(design, penalty, S, theta0,
                                           Eigen::VectorXd::Zero(penalty.n_coef()), opts.inner_tol,
                                           opts.max_inner_iter);
  if (!inner.converged) throw convergence_error("initial inner solve failed");
  st.B = inner.coef;
  st.inner_iterations = inner.iterations;
  st.objective = laplace_objective(st.B, design, penalty, S, theta0, {phi0});
  st.gradient = laplace_gradient(st.B, design, penalty, S, theta0, {phi0});
  st.hess_inv = Eigen::MatrixXd::Identity(st.layout.size(), st.layout.size());
  return st;
}

// One safeguarded quasi-Newton ascent step on the Laplace objective in log
// parameters. Returns false when already stationary or no improving step
// exists; the state is then unchanged.
inline bool outer_step(OuterState& st, const DesignSystem& design, const PenaltyStructure& penalty,
                       const Eigen::VectorXd& S, const OuterOptions& opts = {}) {
  const auto& layout = st.layout;
  Eigen::VectorXd g = st.gradient;
  if (opts.fix_phi) g[layout.phi_index()] = 0.0;
  const Eigen::VectorXd lo = layout.lower();
  const Eigen::VectorXd hi = layout.upper();
  for (int k = 0; k < g.size(); ++k) {   // ignore gradient pushing outward at a bound
    if (st.rho[k] <= lo[k] + 1e-12 && g[k] < 0) g[k] = 0.0;
    if (st.rho[k] >= hi[k] - 1e-12 && g[k] > 0) g[k] = 0.0;
  }
  if (g.lpNorm<Eigen::Infinity>() < opts.stationary_tol) return false;

  Eigen::VectorXd dir = st.hess_inv * g;
  if (dir.dot(g) <= 0.0) {
    st.hess_inv.setIdentity();
    st.have_curvature = false;
    dir = g;
  }
  const double dmax = dir.lpNorm<Eigen::Infinity>();
  if (dmax > opts.max_step) dir *= opts.max_step / dmax;
  if (opts.fix_phi) dir[layout.phi_index()] = 0.0;

  double step = 1.0;
  for (int half = 0; half < opts.max_halvings; ++half, step *= 0.5) {
    Eigen::VectorXd rho_trial = (st.rho + step * dir).cwiseMax(lo).cwiseMin(hi);
    if ((rho_trial - st.rho).lpNorm<Eigen::Infinity>() == 0.0) break;
    const VarianceComponents theta = layout.theta(rho_trial);
    const double phi = layout.phi(rho_trial);
    InnerResult inner = detail::inner_newton(design, penalty, S, theta, st.B, opts.inner_tol,
                                             opts.max_inner_iter);
    if (!inner.converged) continue;
    double obj;
    try {
      obj = laplace_objective(inner.coef, design, penalty, S, theta, {phi});
    } catch (const numeric_error&) {
      continue;
    }
    if (!std::isfinite(obj)) continue;
    if (obj >= st.objective + 1e-4 * step * dir.dot(g) ||
        (half + 1 == opts.max_halvings && obj >= st.objective)) {
      const Eigen::VectorXd s = rho_trial - st.rho;
      const Eigen::VectorXd g_new = laplace_gradient(inner.coef, design, penalty, S, theta, {phi});
      Eigen::VectorXd y = -(g_new - st.gradient);   // minimization convention
      if (opts.fix_phi) y[layout.phi_index()] = 0.0;
      const double sy = s.dot(y);
      if (sy > 1e-10 * s.norm() * y.norm()) {
        if (!st.have_curvature) {
          st.hess_inv.setIdentity();
          st.hess_inv *= sy / y.squaredNorm();
          st.have_curvature = true;
        }
        const Eigen::VectorXd Hy = st.hess_inv * y;
        const double yHy = y.dot(Hy);
        st.hess_inv += ((sy + yHy) / (sy * sy)) * (s * s.transpose()) -
                       (Hy * s.transpose() + s * Hy.transpose()) / sy;
      }
      st.rho = rho_trial;
      st.B = inner.coef;
      st.objective = obj;
      st.gradient = g_new;
      st.inner_iterations += inner.iterations;
      return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Full fit (nested optimization + moment-based dispersion)
// ---------------------------------------------------------------------------

struct FitOptions {
  double tol = 1e-6;            // Algorithm stopping rule on ||B_s - B_{s-1}||_2
  int max_inner_iter = 200;
  int max_outer_iter = 200;
  std::optional<double> fixed_phi;            // ES solve step
  std::optional<VarianceComponents> theta_init;
  std::optional<Eigen::VectorXd> coef_init;
};

struct FitResult {
  Eigen::VectorXd coef;                   // alpha blocks then u
  VarianceComponents theta;
  double phi_lik = 1.0;
  double phi_pearson = 1.0;
  double phi_fletcher = 1.0;
  bool phi_floored = false;
  double edf_total = 0.0;
  Eigen::VectorXd edf_per_term;
  Eigen::MatrixXd xtwx;                   // X^T W X at the fit
  Eigen::MatrixXd hessian;                // X^T W X + Sigma at the fit
  Eigen::VectorXd pi_hat;
  Eigen::VectorXd working_counts;         // S for complete fits, eta for ES fits
  bool converged = false;
  bool degenerate = false;
  int outer_iterations = 0;
  int inner_iterations = 0;
  std::vector<double> objective_trace;

  // bookkeeping copied from the design so inference can slice blocks
  std::vector<std::pair<int, int>> blocks;
  int n_fixed = 0;
  int n_samples = 0;
  bool include_re = true;

  // error-model extras (NaN / 0 for complete-data fits)
  double phi_y = std::numeric_limits<double>::quiet_NaN();
  double phi_plugin = std::numeric_limits<double>::quiet_NaN();
  int es_iterations = 0;

  Eigen::VectorXd alpha(int p) const {
    const auto [a, b] = blocks.at(p);
    return coef.segment(a, b - a);
  }
  Eigen::VectorXd u() const {
    return include_re ? coef.tail(n_samples) : Eigen::VectorXd::Zero(n_samples);
  }
  // Dispersion feeding downstream inference: the plug-in estimate for
  // error-aware fits, Fletcher's estimate otherwise.
  double phi() const { return std::isnan(phi_plugin) ? phi_fletcher : phi_plugin; }
  // RE variance on the conditional-model scale (the penalty is parametrized
  // with phi factored out, so the reported variance rescales by phi).
  double sigma0_sq_marginal() const { return include_re ? phi() * theta.sigma0_sq : 0.0; }
};

inline FitResult fit(const DesignSystem& design, const PenaltyStructure& penalty,
                     const Eigen::VectorXd& S, const FitOptions& opts = {}) {
  VarianceComponents theta0;
  if (opts.theta_init) {
    theta0 = *opts.theta_init;
  } else {
    theta0.lambda = Eigen::VectorXd::Ones(penalty.n_terms());
    theta0.sigma0_sq = 1.0;
  }
  if (!penalty.include_re()) theta0.sigma0_sq = 0.0;
  const double phi0 = opts.fixed_phi.value_or(1.0);

  OuterOptions outer_opts;
  outer_opts.inner_tol = std::min(1e-9, opts.tol * 1e-3);
  outer_opts.max_inner_iter = opts.max_inner_iter;
  outer_opts.fix_phi = opts.fixed_phi.has_value();

  OuterState st = make_outer_state(design, penalty, S, theta0, phi0, outer_opts);
  if (opts.coef_init && opts.coef_init->size() == st.B.size()) {
    InnerResult warm = detail::inner_newton(design, penalty, S, theta0, *opts.coef_init,
                                            outer_opts.inner_tol, outer_opts.max_inner_iter);
    if (warm.converged) {
      st.B = warm.coef;
      st.objective = laplace_objective(st.B, design, penalty, S, theta0, {phi0});
      st.gradient = laplace_gradient(st.B, design, penalty, S, theta0, {phi0});
    }
  }

  FitResult out;
  out.objective_trace.push_back(st.objective);
  bool converged = false;
  int s = 0;
  for (; s < opts.max_outer_iter; ++s) {
    const Eigen::VectorXd B_prev = st.B;
    const bool moved = outer_step(st, design, penalty, S, outer_opts);
    out.objective_trace.push_back(st.objective);
    if (!moved || (st.B - B_prev).norm() < opts.tol) {
      converged = true;
      ++s;
      break;
    }
  }
  if (!converged)
    throw convergence_error("outer iteration did not converge in " +
                                std::to_string(opts.max_outer_iter) + " steps",
                            out.objective_trace);

  const VarianceComponents theta = st.theta();
  const Eigen::VectorXd pi = mean_probabilities(design, st.B);
  const Eigen::VectorXd w = weight_vector(design, pi);
  out.coef = st.B;
  out.theta = theta;
  out.xtwx = design.xtwx(w);
  out.hessian = out.xtwx + penalty.sigma(theta);
  const Edf e = edf(penalty, out.xtwx, out.hessian);
  out.edf_total = e.total;
  out.edf_per_term = e.per_term;
  out.pi_hat = pi;
  out.working_counts = S;
  out.converged = true;
  out.outer_iterations = s;
  out.inner_iterations = st.inner_iterations;
  out.blocks = design.blocks;
  out.n_fixed = design.n_fixed();
  out.n_samples = design.n_samples;
  out.include_re = design.include_re;

  const double dev = deviance_sum(S, design.depth, pi);
  const double quad = penalty.quad_form(theta, st.B);
  const double m_eff = design.n_rows() - penalty.null_dim();
  out.phi_lik = (dev + quad) / m_eff;
  const FletcherPhi f = fletcher_phi(S, design.depth, pi, e.total);
  out.phi_pearson = f.pearson;
  out.phi_fletcher = f.fletcher;
  out.phi_floored = f.floored;

  const double smax = S.maxCoeff(), smin = (S - design.depth).minCoeff();
  out.degenerate = (smax <= 0.0) || (smin >= 0.0);
  return out;
}

inline FitResult fit(const RegionData& region, const ModelSpec& spec, const DesignSystem& design,
                     const PenaltyStructure& penalty) {
  FitOptions opts;
  opts.tol = spec.tol;
  opts.max_inner_iter = spec.max_inner_iter;
  opts.max_outer_iter = spec.max_outer_iter;
  return fit(design, penalty, flatten_counts(region, region.meth_reads), opts);
}

}  // namespace qbmm
