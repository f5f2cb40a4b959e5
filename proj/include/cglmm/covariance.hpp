#pragma once

// Estimation of the random-component variance (sigma^2) or covariance
// (Sigma) by maximizing the integral of N(b_hat; b, Sigma_b_hat) against the
// random-component distribution.

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/random/sobol.hpp>

#include "detail/linalg.hpp"
#include "detail/optimize.hpp"
#include "fit_result.hpp"
#include "godambe.hpp"
#include "model.hpp"

namespace cglmm {

inline constexpr double kVarianceFloor = 1e-8;

// ---------------------------------------------------------------------------
// univariate Gaussian closed form

/// Log of |2 pi S|^{-1/2} (2 pi s2)^{-q/2} exp(-b'S^{-1}b / 2) |2 pi M^{-1}|^{1/2}
/// exp(b'S^{-1}M^{-1}S^{-1}b / 2) with M = S^{-1} + I / s2, evaluated in the
/// eigenbasis of S after flooring its eigenvalues at 1e-10.
inline double variance_integral_log(const VectorXd& b_hat, const MatrixXd& Sigma_b_hat, double sigma2) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (Sigma_b_hat + Sigma_b_hat.transpose()));
  const VectorXd e = es.eigenvalues().cwiseMax(1e-10);
  const VectorXd c = es.eigenvectors().transpose() * b_hat;
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double total = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double m = 1.0 / e[i] + 1.0 / sigma2;
    total += -0.5 * std::log(two_pi * e[i]) - 0.5 * std::log(two_pi * sigma2) - 0.5 * c[i] * c[i] / e[i] +
             0.5 * std::log(two_pi / m) + 0.5 * (c[i] / e[i]) * (c[i] / e[i]) / m;
  }
  return total;
}

struct VarianceEstimate {
  double sigma2 = kVarianceFloor;
  bool boundary = false;
  double log_objective = 0.0;
};

inline VarianceEstimate estimate_variance_gaussian(const VectorXd& b_hat, const MatrixXd& Sigma_b_hat) {
  const Eigen::Index q = b_hat.size();
  double var_b = 0.0;
  if (q > 1) var_b = (b_hat.array() - b_hat.mean()).square().sum() / static_cast<double>(q - 1);
  const double lo = std::log(kVarianceFloor);
  double hi = std::log(1e6 * var_b + 1.0);
  auto negf = [&](double t) { return -variance_integral_log(b_hat, Sigma_b_hat, std::exp(t)); };
  detail::ScalarMinimum m = detail::brent_newton_minimize(negf, lo, hi);
  for (int expand = 0; m.at_upper && expand < 20; ++expand) {
    hi += std::log(100.0);
    m = detail::brent_newton_minimize(negf, lo, hi);
  }
  VarianceEstimate out;
  if (m.at_lower || -negf(lo) >= -m.value) {
    out.sigma2 = kVarianceFloor;
    out.boundary = true;
    out.log_objective = -negf(lo);
  } else {
    out.sigma2 = std::exp(m.x);
    out.log_objective = -m.value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// general (multivariate, nested, non-nested) Gaussian and Student-t

/// Stacked predicted vector s = (s_(1)', ..., s_(d)')' with covariance
/// Sigma_s and one loading matrix C_r (L x q_r) per random component; the
/// implied marginal covariance is Sigma_s + sum_r Sigma_r (x) C_r C_r'.
struct CovarianceProblem {
  VectorXd s;
  MatrixXd Sigma_s;
  std::vector<MatrixXd> C;
  int d = 1;

  Eigen::Index L() const { return s.size() / d; }
};

struct CovarianceEstimate {
  std::vector<MatrixXd> Sigma;
  std::vector<bool> boundary;
  bool converged = false;
  double grad_norm = 0.0;
  double log_objective = 0.0;
};

namespace detail {

inline MatrixXd kron(const MatrixXd& A, const MatrixXd& B) {
  MatrixXd K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

/// Second-moment matrix of the rows of s reshaped to L x d.
inline MatrixXd row_moment(const VectorXd& s, int d) {
  const Eigen::Index L = s.size() / d;
  const Eigen::Map<const MatrixXd> R(s.data(), L, d);
  return R.transpose() * R / static_cast<double>(std::max<Eigen::Index>(L, 1));
}

inline std::vector<MatrixXd> unpack_all(const VectorXd& theta, int d, std::size_t R) {
  const Eigen::Index per = d * (d + 1) / 2;
  std::vector<MatrixXd> out;
  for (std::size_t r = 0; r < R; ++r) {
    const MatrixXd Lr = unpack_cholesky(theta.segment(static_cast<Eigen::Index>(r) * per, per), d);
    out.push_back(Lr * Lr.transpose());
  }
  return out;
}

inline std::vector<bool> boundary_flags(const std::vector<MatrixXd>& Sigma, double scale) {
  std::vector<bool> out;
  for (const auto& S : Sigma) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    out.push_back(es.eigenvalues().minCoeff() < 1e-6 * std::max(scale, 1e-12));
  }
  return out;
}

}  // namespace detail

inline double covariance_integral_log(const CovarianceProblem& prob, const MatrixXd& Sigma_s_floored,
                                      const std::vector<MatrixXd>& Sigma) {
  MatrixXd K = Sigma_s_floored;
  for (std::size_t r = 0; r < Sigma.size(); ++r) K += detail::kron(Sigma[r], prob.C[r] * prob.C[r].transpose());
  return detail::log_normal_density(prob.s, K);
}

/// Gaussian random components: maximizes log N(s; 0, Sigma_s + sum_r Sigma_r (x) C_r C_r')
/// over lower-triangular factors of each Sigma_r.
inline CovarianceEstimate estimate_covariance_gaussian(const CovarianceProblem& prob) {
  const int d = prob.d;
  const std::size_t R = prob.C.size();
  const MatrixXd Ss = detail::floor_psd(prob.Sigma_s);
  const MatrixXd M = detail::row_moment(prob.s, d);
  const double scale = std::max(M.trace() / d, 1e-8);
  std::vector<MatrixXd> init;
  for (std::size_t r = 0; r < R; ++r)
    init.push_back(M / static_cast<double>(R) + 1e-3 * scale * MatrixXd::Identity(d, d));
  const Eigen::Index per = d * (d + 1) / 2;
  VectorXd theta(per * static_cast<Eigen::Index>(R));
  for (std::size_t r = 0; r < R; ++r) theta.segment(static_cast<Eigen::Index>(r) * per, per) = detail::pack_cholesky(init[r]);
  auto negf = [&](const VectorXd& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (std::abs(t[i]) > 50.0) return std::numeric_limits<double>::infinity();
    try {
      return -covariance_integral_log(prob, Ss, detail::unpack_all(t, d, R));
    } catch (const std::runtime_error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  detail::BfgsOptions bo;
  bo.grad_tol = 1e-7;
  const detail::MinimizeResult mr = detail::bfgs_minimize(negf, theta, bo);
  CovarianceEstimate out;
  out.Sigma = detail::unpack_all(mr.x, d, R);
  out.boundary = detail::boundary_flags(out.Sigma, scale);
  out.converged = mr.converged;
  out.grad_norm = mr.grad_norm;
  out.log_objective = -mr.value;
  return out;
}

/// Multivariate Student-t random components (one component, C = I): the
/// integral factorizes over clusters using the per-cluster d x d blocks of
/// Sigma_s; each factor E_{b ~ N(s_c, Sigma_s,c)} t(b; Sigma, dof) is
/// computed with a fixed Sobol point set. Sigma is the covariance of the t
/// distribution (scale matrix Sigma (dof - 2) / dof).
inline CovarianceEstimate estimate_covariance_student_t(const CovarianceProblem& prob, double dof, int n_points = 4096) {
  const int d = prob.d;
  const Eigen::Index L = prob.L();
  const MatrixXd Ss = detail::floor_psd(prob.Sigma_s);
  // quasi-random standard normal points
  boost::random::sobol engine(static_cast<std::size_t>(d));
  const boost::math::normal_distribution<double> nd;
  MatrixXd Zpts(d, n_points);
  for (int k = 0; k < n_points; ++k)
    for (int a = 0; a < d; ++a) {
      const double u = (static_cast<double>(engine() >> 11) + 0.5) * 0x1p-53;
      Zpts(a, k) = boost::math::quantile(nd, u);
    }
  // per-cluster point clouds s_c + L_c z
  std::vector<MatrixXd> clouds(static_cast<std::size_t>(L));
  for (Eigen::Index c = 0; c < L; ++c) {
    VectorXd sc(d);
    MatrixXd Sc(d, d);
    for (int a = 0; a < d; ++a) {
      sc[a] = prob.s[a * L + c];
      for (int b2 = 0; b2 < d; ++b2) Sc(a, b2) = Ss(a * L + c, b2 * L + c);
    }
    const MatrixXd Lc = Eigen::LLT<MatrixXd>(detail::floor_psd(Sc)).matrixL();
    clouds[static_cast<std::size_t>(c)] = (Lc * Zpts).colwise() + sc;
  }
  const double log_const = std::lgamma((dof + d) / 2.0) - std::lgamma(dof / 2.0) - 0.5 * d * std::log(dof * std::numbers::pi);
  auto negf = [&](const VectorXd& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (std::abs(t[i]) > 50.0) return std::numeric_limits<double>::infinity();
    const MatrixXd Lf = detail::unpack_cholesky(t, d) * std::sqrt((dof - 2.0) / dof);  // factor of the scale matrix
    const double half_logdet = Lf.diagonal().array().log().sum();
    double total = 0.0;
    for (const auto& cloud : clouds) {
      const MatrixXd Y = Lf.triangularView<Eigen::Lower>().solve(cloud);
      double mx = -std::numeric_limits<double>::infinity();
      VectorXd lv(n_points);
      for (int k = 0; k < n_points; ++k) {
        lv[k] = -(dof + d) / 2.0 * std::log1p(Y.col(k).squaredNorm() / dof);
        mx = std::max(mx, lv[k]);
      }
      total += log_const - half_logdet + mx + std::log((lv.array() - mx).exp().mean());
    }
    return -total;
  };
  const MatrixXd M = detail::row_moment(prob.s, d);
  const double scale = std::max(M.trace() / d, 1e-8);
  const VectorXd theta = detail::pack_cholesky(M + 1e-3 * scale * MatrixXd::Identity(d, d));
  detail::BfgsOptions bo;
  bo.grad_tol = 1e-6;
  const detail::MinimizeResult mr = detail::bfgs_minimize(negf, theta, bo);
  CovarianceEstimate out;
  const MatrixXd Lr = detail::unpack_cholesky(mr.x, d);
  out.Sigma = {Lr * Lr.transpose()};
  out.boundary = detail::boundary_flags(out.Sigma, scale);
  out.converged = mr.converged;
  out.grad_norm = mr.grad_norm;
  out.log_objective = -mr.value;
  return out;
}

inline CovarianceEstimate estimate_covariance_general(const CovarianceProblem& prob, const RandomDist& dist) {
  if (dist.kind == RandomDist::Kind::student_t) {
    if (prob.C.size() != 1)
      throw ConfigError("student_t random components are supported for a single cluster component only");
    return estimate_covariance_student_t(prob, dist.dof);
  }
  return estimate_covariance_gaussian(prob);
}

// ---------------------------------------------------------------------------
// glue between a fit and the estimators above

/// Random-component values entering the linear predictor of each fitted
/// (finest-level) component: its own values plus those of its ancestors.
inline VectorXd chain_expand(const ModelDesign& design, int leaf, const std::vector<VectorXd>& b) {
  const auto& comps = design.components;
  VectorXd v = b[static_cast<std::size_t>(leaf)];
  std::vector<int> anc(static_cast<std::size_t>(comps[leaf].q));
  for (int c = 0; c < comps[leaf].q; ++c) anc[c] = c;
  for (int cur = leaf; comps[cur].parent >= 0; cur = comps[cur].parent) {
    const int p = comps[cur].parent;
    for (int c = 0; c < comps[leaf].q; ++c) {
      anc[c] = comps[cur].parent_of[anc[c]];
      v[c] += b[static_cast<std::size_t>(p)][anc[c]];
    }
  }
  return v;
}

/// Leaf-to-component indicator (q_leaf x q_r) for a component on the leaf's
/// nesting chain; empty when r is not on the chain.
inline std::optional<MatrixXd> chain_loading(const ModelDesign& design, int leaf, int r) {
  const auto& comps = design.components;
  std::vector<int> anc(static_cast<std::size_t>(comps[leaf].q));
  for (int c = 0; c < comps[leaf].q; ++c) anc[c] = c;
  int cur = leaf;
  while (cur != r) {
    const int p = comps[cur].parent;
    if (p < 0) return std::nullopt;
    for (auto& a : anc) a = comps[cur].parent_of[a];
    cur = p;
  }
  MatrixXd C = MatrixXd::Zero(comps[leaf].q, comps[r].q);
  for (int c = 0; c < comps[leaf].q; ++c) C(c, anc[c]) = 1.0;
  return C;
}

struct FittedMarginal {
  MarginalProblem problem;
  std::vector<VectorXd> b;  // per fitted component, including ancestor contributions
};

inline FittedMarginal fitted_marginal(const ModelDesign& design, const FitResult& fit, std::size_t j) {
  FittedMarginal out;
  std::vector<const ClusterComponent*> comps;
  for (int r : design.fitted_components()) {
    comps.push_back(&design.components[r]);
    out.b.push_back(chain_expand(design, r, fit.marginals[j].b));
  }
  out.problem = MarginalProblem(design.marginals[j], comps);
  return out;
}

inline GodambeBlocks godambe_blocks(const ModelDesign& design, const FitResult& fit, std::size_t j,
                                    const GodambeOptions& opts = {}) {
  const FittedMarginal fm = fitted_marginal(design, fit, j);
  const auto& mf = fit.marginals[j];
  return godambe_blocks(fm.problem, mf.beta, fm.b, mf.lambda, opts, mf.degenerate);
}

/// Covariance of the predicted random components of marginal j (fitted
/// components stacked), from the b block of the inverse Godambe information.
inline MatrixXd sigma_b_hat(const ModelDesign& design, const FitResult& fit, std::size_t j,
                            GodambeMode mode = GodambeMode::empirical) {
  GodambeOptions o;
  o.mode = mode;
  return godambe_blocks(design, fit, j, o).b_covariance();
}

/// Fills fit.Sigma / fit.sigma_boundary and per-marginal beta covariances.
inline void estimate_random_covariance(const ModelDesign& design, FitResult& fit) {
  const std::size_t d = design.marginals.size();
  const std::vector<int> fitted = design.fitted_components();
  // clusters of fitted components excluded because some marginal clamped them
  std::vector<std::vector<bool>> dropped;
  for (std::size_t f = 0; f < fitted.size(); ++f) {
    std::vector<bool> drop(static_cast<std::size_t>(design.components[fitted[f]].q), false);
    for (const auto& mf : fit.marginals)
      if (f < mf.degenerate.size())
        for (int c : mf.degenerate[f]) drop[c] = true;
    dropped.push_back(drop);
  }
  std::vector<Eigen::Index> keep;  // kept positions in the stacked fitted-b space
  Eigen::Index offset = 0;
  for (std::size_t f = 0; f < fitted.size(); ++f) {
    for (int c = 0; c < design.components[fitted[f]].q; ++c)
      if (!dropped[f][c]) keep.push_back(offset + c);
    offset += design.components[fitted[f]].q;
  }
  const Eigen::Index Lfull = offset, L = static_cast<Eigen::Index>(keep.size());

  CovarianceProblem prob;
  prob.d = static_cast<int>(d);
  prob.s = VectorXd::Zero(L * static_cast<Eigen::Index>(d));
  prob.Sigma_s = MatrixXd::Zero(prob.s.size(), prob.s.size());
  for (std::size_t j = 0; j < d; ++j) {
    const FittedMarginal fm = fitted_marginal(design, fit, j);
    MatrixXd Sb;
    try {
      const GodambeBlocks g = godambe_blocks(fm.problem, fit.marginals[j].beta, fm.b, fit.marginals[j].lambda, {},
                                             fit.marginals[j].degenerate);
      fit.marginals[j].beta_cov = g.J_inv_beta;
      Sb = g.b_covariance();
    } catch (const SingularMatrixError& e) {
      fit.notes.push_back("marginal " + design.marginals[j].response + ": " + e.what() +
                          "; diagonal approximation used for the random-component covariance");
      Sb = MatrixXd::Zero(Lfull, Lfull);
      const LinearState st = fm.problem.state(fit.marginals[j].beta, fm.b);
      const VectorXd w = fm.problem.weights(st.mu, true);
      Eigen::Index off = 0;
      for (std::size_t r = 0; r < fm.problem.comps.size(); ++r) {
        const VectorXd ws = fm.problem.cluster_sums(r, w);
        for (Eigen::Index c = 0; c < ws.size(); ++c) Sb(off + c, off + c) = 2.0 * fit.marginals[j].lambda / ws[c];
        off += ws.size();
      }
    }
    VectorXd sj(Lfull);
    Eigen::Index off = 0;
    for (const auto& bf : fm.b) {
      sj.segment(off, bf.size()) = project_zero_mean(bf);
      off += bf.size();
    }
    const Eigen::Index base = static_cast<Eigen::Index>(j) * L;
    for (Eigen::Index a = 0; a < L; ++a) {
      prob.s[base + a] = sj[keep[a]];
      for (Eigen::Index c = 0; c < L; ++c) prob.Sigma_s(base + a, base + c) = Sb(keep[a], keep[c]);
    }
  }
  // loadings of every random component onto the kept stacked positions
  for (std::size_t r = 0; r < design.components.size(); ++r) {
    MatrixXd C = MatrixXd::Zero(L, design.components[r].q);
    Eigen::Index off = 0;
    std::vector<Eigen::Index> rowmap(static_cast<std::size_t>(Lfull), -1);
    for (Eigen::Index a = 0; a < L; ++a) rowmap[static_cast<std::size_t>(keep[a])] = a;
    for (std::size_t f = 0; f < fitted.size(); ++f) {
      const auto Cf = chain_loading(design, fitted[f], static_cast<int>(r));
      if (Cf) {
        for (Eigen::Index c = 0; c < Cf->rows(); ++c)
          if (rowmap[off + c] >= 0) C.row(rowmap[off + c]) = Cf->row(c);
      }
      off += design.components[fitted[f]].q;
    }
    prob.C.push_back(C);
  }

  fit.Sigma.clear();
  fit.sigma_boundary.clear();
  if (d == 1 && design.components.size() == 1 && design.random_dist.kind == RandomDist::Kind::gaussian) {
    const VarianceEstimate ve = estimate_variance_gaussian(prob.s, prob.Sigma_s);
    fit.Sigma.push_back(MatrixXd::Constant(1, 1, ve.sigma2));
    fit.sigma_boundary.push_back(ve.boundary);
    return;
  }
  const CovarianceEstimate ce = estimate_covariance_general(prob, design.random_dist);
  fit.Sigma = ce.Sigma;
  fit.sigma_boundary = ce.boundary;
  if (!ce.converged)
    fit.notes.push_back("covariance optimizer stopped with gradient norm " + std::to_string(ce.grad_norm));
}

}  // namespace cglmm
