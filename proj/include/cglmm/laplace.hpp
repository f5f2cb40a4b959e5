#pragma once

// Multivariate Laplace / penalized quasi-likelihood baseline: working-response
// linearization, mixed-model equations with penalty (Sigma (x) I_q)^{-1}, and
// Sigma / dispersion updates from the profile likelihood of the working
// linear mixed model.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "conditional.hpp"
#include "detail/linalg.hpp"
#include "detail/optimize.hpp"
#include "fit_result.hpp"
#include "inference.hpp"
#include "model.hpp"

namespace cglmm {

struct LaplaceOptions {
  FitOptions fit;
  std::optional<MatrixXd> fixed_Sigma;  // hold Sigma at this value
  double sigma_tol = 1e-6;              // max change of Sigma entries between iterations
};

inline constexpr double kWeightCap = 1e10;

/// PQL weight 1 / (lambda V(mu) g'(mu)^2); entries are capped at 1e10.
inline double glm_weight(FamilyId family, LinkId link, double mu, double lambda, double trials = 1.0) {
  const double g1 = link_derivative(link, mu);
  const double w = 1.0 / (lambda * variance_function(family, mu, trials) * g1 * g1);
  return std::isfinite(w) ? std::min(w, kWeightCap) : kWeightCap;
}

/// Diagonal of the block-diagonal weight matrix (marginals stacked).
inline VectorXd glm_weights(const ModelDesign& design, const std::vector<VectorXd>& eta, const std::vector<double>& lambda) {
  const Eigen::Index n = design.n;
  VectorXd w(n * static_cast<Eigen::Index>(design.marginals.size()));
  for (std::size_t j = 0; j < design.marginals.size(); ++j) {
    const auto& m = design.marginals[j];
    for (Eigen::Index i = 0; i < n; ++i)
      w[static_cast<Eigen::Index>(j) * n + i] =
          glm_weight(m.family, m.link, link_invert(m.link, eta[j][i]), lambda[j], m.trials[i]);
  }
  return w;
}

namespace detail {

/// Per-cluster sufficient quantities of the working model for fixed weights
/// w0 (computed with lambda = 1), so dispersion changes only rescale them.
struct WorkingSums {
  int d = 0, q = 0;
  Eigen::Index ktot = 0;
  std::vector<Eigen::Index> koff;  // offset of beta_j in the stacked beta
  MatrixXd XtWX;                   // ktot x ktot, lambda = 1
  VectorXd XtWz;
  std::vector<double> zWz;         // per marginal
  MatrixXd s;                      // q x d cluster weight sums
  MatrixXd r;                      // q x d cluster sums of w z
  std::vector<MatrixXd> G;         // per cluster d x ktot
  std::vector<double> logw;        // per marginal, sum of log w0
  std::vector<Eigen::Index> nobs;  // per marginal
};

inline WorkingSums working_sums(const ModelDesign& design, const ClusterComponent& comp, const VectorXd& w0,
                                const std::vector<VectorXd>& z) {
  WorkingSums ws;
  ws.d = static_cast<int>(design.marginals.size());
  ws.q = comp.q;
  for (const auto& m : design.marginals) {
    ws.koff.push_back(ws.ktot);
    ws.ktot += m.k();
  }
  const Eigen::Index n = design.n;
  ws.XtWX = MatrixXd::Zero(ws.ktot, ws.ktot);
  ws.XtWz = VectorXd::Zero(ws.ktot);
  ws.s = MatrixXd::Zero(ws.q, ws.d);
  ws.r = MatrixXd::Zero(ws.q, ws.d);
  ws.G.assign(static_cast<std::size_t>(ws.q), MatrixXd::Zero(ws.d, ws.ktot));
  for (int j = 0; j < ws.d; ++j) {
    const MatrixXd& X = design.marginals[j].X;
    const auto wj = w0.segment(static_cast<Eigen::Index>(j) * n, n);
    const Eigen::Index k = X.cols(), o = ws.koff[j];
    ws.XtWX.block(o, o, k, k) = X.transpose() * wj.asDiagonal() * X;
    ws.XtWz.segment(o, k) = X.transpose() * (wj.array() * z[j].array()).matrix();
    ws.zWz.push_back((wj.array() * z[j].array().square()).sum());
    ws.logw.push_back(wj.array().log().sum());
    ws.nobs.push_back(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = comp.index[i];
      ws.s(c, j) += wj[i];
      ws.r(c, j) += wj[i] * z[j][i];
      ws.G[c].row(j).segment(o, k) += wj[i] * X.row(i);
    }
  }
  return ws;
}

struct MmeSolution {
  VectorXd beta;           // stacked
  MatrixXd b;              // q x d
  MatrixXd schur;          // information of beta (X'V^{-1}X)
  double neg2_profile = 0; // -2 x ML profile log-likelihood (without 2 pi constant)
};

/// Solves the mixed-model equations for given Sigma and dispersions and
/// evaluates the profile likelihood of the working model.
inline MmeSolution solve_mme(const WorkingSums& ws, const MatrixXd& Sigma, const std::vector<double>& lambda) {
  const int d = ws.d;
  Eigen::LLT<MatrixXd> sl(Sigma);
  if (sl.info() != Eigen::Success) throw std::runtime_error("Sigma is not positive definite");
  const MatrixXd Sinv = sl.solve(MatrixXd::Identity(d, d));
  const double logdet_S = 2.0 * sl.matrixLLT().diagonal().array().log().sum();
  VectorXd scale(d);
  for (int j = 0; j < d; ++j) scale[j] = 1.0 / lambda[j];
  MatrixXd A = MatrixXd::Zero(ws.ktot, ws.ktot);
  VectorXd rhs = VectorXd::Zero(ws.ktot);
  for (int j = 0; j < d; ++j) {
    const Eigen::Index o = ws.koff[j];
    const Eigen::Index k = (j + 1 < d ? ws.koff[j + 1] : ws.ktot) - o;
    A.block(o, o, k, k) = ws.XtWX.block(o, o, k, k) * scale[j];
    rhs.segment(o, k) = ws.XtWz.segment(o, k) * scale[j];
  }
  double logdet_M = 0.0;
  std::vector<Eigen::LLT<MatrixXd>> Ms;
  std::vector<MatrixXd> Gs;
  std::vector<VectorXd> rs;
  for (int c = 0; c < ws.q; ++c) {
    const MatrixXd Gc = scale.asDiagonal() * ws.G[c];
    const VectorXd rc = scale.asDiagonal() * ws.r.row(c).transpose();
    MatrixXd M = Sinv;
    for (int j = 0; j < d; ++j) M(j, j) += ws.s(c, j) * scale[j];
    Eigen::LLT<MatrixXd> ml(M);
    logdet_M += 2.0 * ml.matrixLLT().diagonal().array().log().sum();
    A -= Gc.transpose() * ml.solve(Gc);
    rhs -= Gc.transpose() * ml.solve(rc);
    Ms.push_back(ml);
    Gs.push_back(Gc);
    rs.push_back(rc);
  }
  MmeSolution sol;
  Eigen::LDLT<MatrixXd> al(A);
  sol.beta = al.solve(rhs);
  sol.schur = A;
  sol.b = MatrixXd(ws.q, d);
  // quadratic form e'V^{-1}e with e = z - X beta, via Woodbury
  double quad = 0.0;
  for (int j = 0; j < d; ++j) {
    const Eigen::Index o = ws.koff[j];
    const Eigen::Index k = (j + 1 < d ? ws.koff[j + 1] : ws.ktot) - o;
    const VectorXd bj = sol.beta.segment(o, k);
    quad += scale[j] * (ws.zWz[j] - 2.0 * bj.dot(ws.XtWz.segment(o, k)) + bj.dot(ws.XtWX.block(o, o, k, k) * bj));
  }
  for (int c = 0; c < ws.q; ++c) {
    const VectorXd t = rs[c] - Gs[c] * sol.beta;
    const VectorXd bc = Ms[c].solve(t);
    sol.b.row(c) = bc.transpose();
    quad -= t.dot(bc);
  }
  double logdet_Winv = 0.0;
  for (int j = 0; j < d; ++j) logdet_Winv += -ws.logw[j] + static_cast<double>(ws.nobs[j]) * std::log(lambda[j]);
  sol.neg2_profile = logdet_Winv + ws.q * logdet_S + logdet_M + quad;
  return sol;
}

}  // namespace detail

/// Laplace / PQL fit for a single Gaussian random component shared by all
/// marginals.
inline FitResult fit_laplace(const ModelDesign& design, const LaplaceOptions& lopts = {}) {
  if (design.random_dist.kind != RandomDist::Kind::gaussian)
    throw ConfigError("the laplace method supports gaussian random components only");
  if (design.components.size() != 1)
    throw ConfigError("the laplace method supports a single cluster component only");
  const FitOptions& opts = lopts.fit;
  const ClusterComponent& comp = design.components[0];
  const int d = static_cast<int>(design.marginals.size());
  const Eigen::Index n = design.n;

  FitResult res;
  res.method = "laplace";
  std::vector<VectorXd> beta(d);
  std::vector<double> lambda(d);
  std::vector<bool> free_lambda(d);
  for (int j = 0; j < d; ++j) {
    const MarginalProblem p(design.marginals[j], {&comp});
    const BetaUpdate glm = fit_glm(p, opts);
    beta[j] = glm.beta;
    lambda[j] = glm.lambda;
    free_lambda[j] = !design.marginals[j].dispersion_fixed();
  }
  MatrixXd Sigma = lopts.fixed_Sigma ? *lopts.fixed_Sigma : MatrixXd(0.1 * MatrixXd::Identity(d, d));
  MatrixXd b = MatrixXd::Zero(comp.q, d);
  std::vector<double> trace;
  bool converged = false;
  int iter = 0;
  detail::MmeSolution sol;
  for (iter = 1; iter <= opts.max_outer; ++iter) {
    // working response and weights at the current (beta, b)
    std::vector<VectorXd> eta(d), z(d);
    VectorXd w0(n * d);
    for (int j = 0; j < d; ++j) {
      const auto& m = design.marginals[j];
      const MarginalProblem p(m, {&comp});
      eta[j] = p.eta(beta[j], {b.col(j)});
      z[j].resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = link_invert(m.link, eta[j][i]);
        z[j][i] = eta[j][i] + (m.y[i] - mu) * link_derivative(m.link, mu);
        w0[j * n + i] = glm_weight(m.family, m.link, mu, 1.0, m.trials[i]);
      }
    }
    const detail::WorkingSums ws = detail::working_sums(design, comp, w0, z);
    // Sigma and free dispersions from the working-model profile likelihood
    const Eigen::Index per = d * (d + 1) / 2;
    const bool sigma_free = !lopts.fixed_Sigma.has_value();
    VectorXd theta0;
    {
      std::vector<double> t;
      if (sigma_free) {
        const VectorXd ps = detail::pack_cholesky(Sigma);
        t.assign(ps.data(), ps.data() + ps.size());
      }
      for (int j = 0; j < d; ++j)
        if (free_lambda[j]) t.push_back(std::log(lambda[j]));
      theta0 = Eigen::Map<VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    }
    auto unpack = [&](const VectorXd& t, MatrixXd& S, std::vector<double>& lam) {
      Eigen::Index p = 0;
      if (sigma_free) {
        const MatrixXd L = detail::unpack_cholesky(t.head(per), d);
        S = L * L.transpose();
        p = per;
      } else {
        S = Sigma;
      }
      lam = lambda;
      for (int j = 0; j < d; ++j)
        if (free_lambda[j]) lam[j] = std::exp(t[p++]);
    };
    double change_var = 0.0;
    if (theta0.size() > 0) {
      auto negf = [&](const VectorXd& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i)
          if (std::abs(t[i]) > 50.0) return std::numeric_limits<double>::infinity();
        MatrixXd S;
        std::vector<double> lam;
        unpack(t, S, lam);
        try {
          return 0.5 * detail::solve_mme(ws, S + 1e-12 * MatrixXd::Identity(d, d), lam).neg2_profile;
        } catch (const std::runtime_error&) {
          return std::numeric_limits<double>::infinity();
        }
      };
      detail::BfgsOptions bo;
      bo.grad_tol = 1e-8;
      const detail::MinimizeResult mr = detail::bfgs_minimize(negf, theta0, bo);
      MatrixXd S;
      std::vector<double> lam;
      unpack(mr.x, S, lam);
      change_var = (S - Sigma).lpNorm<Eigen::Infinity>();
      Sigma = S;
      for (int j = 0; j < d; ++j) change_var = std::max(change_var, std::abs(lam[j] - lambda[j]));
      lambda = lam;
    }
    MatrixXd Sreg = Sigma;
    Eigen::LLT<MatrixXd> chk(Sreg);
    if (chk.info() != Eigen::Success || Sreg.diagonal().minCoeff() < 1e-10) Sreg += 1e-10 * MatrixXd::Identity(d, d);
    sol = detail::solve_mme(ws, Sreg, lambda);
    double change = change_var < lopts.sigma_tol ? 0.0 : change_var;
    std::vector<VectorXd> beta_new(d);
    for (int j = 0; j < d; ++j) {
      beta_new[j] = sol.beta.segment(ws.koff[j], design.marginals[j].k());
      change = std::max(change, (beta_new[j] - beta[j]).lpNorm<Eigen::Infinity>());
    }
    change = std::max(change, (sol.b - b).lpNorm<Eigen::Infinity>());
    beta = beta_new;
    b = sol.b;
    trace.push_back(change);
    if (change < opts.outer_tol) {
      converged = true;
      break;
    }
  }
  res.converged = converged;
  res.iterations = std::min(iter, opts.max_outer);
  const MatrixXd cov_beta = sol.schur.ldlt().solve(MatrixXd::Identity(sol.schur.rows(), sol.schur.cols()));
  Eigen::Index off = 0;
  for (int j = 0; j < d; ++j) {
    MarginalFit mf;
    mf.beta = beta[j];
    mf.lambda = lambda[j];
    mf.b = {b.col(j)};
    mf.degenerate = {{}};
    mf.trace = trace;
    mf.iterations = res.iterations;
    mf.converged = converged;
    const Eigen::Index k = design.marginals[j].k();
    mf.beta_cov = cov_beta.block(off, off, k, k);
    off += k;
    res.marginals.push_back(std::move(mf));
  }
  res.Sigma = {Sigma};
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(Sigma);
  res.sigma_boundary = {es.eigenvalues().minCoeff() < 1e-8};
  return res;
}

}  // namespace cglmm
