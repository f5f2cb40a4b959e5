#pragma once

// Monte Carlo unconditional asymptotic variances and diagnostics of the
// regularity conditions of the inference functions.

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "conditional.hpp"
#include "covariance.hpp"
#include "godambe.hpp"
#include "random.hpp"
#include "simulation.hpp"

namespace cglmm {

struct UnconditionalAV {
  MatrixXd mean_J_inv_beta;  // average conditional sandwich of beta
  MatrixXd var_beta;         // Monte Carlo variance of E[beta_hat | B] over draws of B
  MatrixXd AV_beta;          // sum of the two terms
  MatrixXd mean_J_inv_b;
  MatrixXd AV_b;             // mean_J_inv_b + sigma^2 I_q
  int draws = 0;
  int failures = 0;
};

/// Draws B from the fitted random-component distribution, simulates two
/// independent response sets per draw at the fitted parameters, refits each
/// (warm-started at the fit) and combines the average conditional sandwich
/// with the variance of the conditional mean of beta_hat given B.
/// Returns one result per marginal.
inline std::vector<UnconditionalAV> unconditional_av(const ModelDesign& design, const FitResult& fit, int n_mc,
                                                     std::uint64_t seed, const FitOptions& opts = {},
                                                     int threads = 1) {
  if (design.components.size() != 1)
    throw ConfigError("unconditional variances are implemented for a single cluster component");
  if (fit.Sigma.empty()) throw ConfigError("fit has no random-component covariance");
  const std::size_t d = design.marginals.size();
  const int q = design.components[0].q;
  const MatrixXd Sigma = detail::floor_psd(fit.Sigma[0], 0.0);
  // square root valid for semi-definite Sigma (sigma^2 = 0 gives B = 0)
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(Sigma);
  const MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  const double dof = design.random_dist.kind == RandomDist::Kind::student_t ? design.random_dist.dof : 0.0;

  struct Draw {
    bool ok = false;
    std::vector<VectorXd> beta[2];
    std::vector<MatrixXd> J_beta, J_b;
  };
  std::vector<Draw> draws(static_cast<std::size_t>(n_mc));
  FitOptions o = opts;
  o.estimate_covariance = false;
  parallel_for(n_mc, threads, [&](int r) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(r), 0);
    FitResult truth = fit;
    for (std::size_t j = 0; j < d; ++j) truth.marginals[j].b = {VectorXd::Zero(q)};
    for (int c = 0; c < q; ++c) {
      const VectorXd v = sample_random_effect(rng, root, dof);
      for (std::size_t j = 0; j < d; ++j) truth.marginals[j].b[0][c] = v[static_cast<Eigen::Index>(j)];
    }
    Draw& out = draws[static_cast<std::size_t>(r)];
    try {
      // two conditionally independent response sets per draw of B
      for (int rep = 0; rep < 2; ++rep) {
        Rng ry = make_rng(seed, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(1 + rep));
        const ModelDesign sim = simulate_responses(design, truth, ry);
        const FitResult refit = fit_conditional(sim, o, &fit);
        if (!refit.converged) return;
        for (std::size_t j = 0; j < d; ++j) {
          const GodambeBlocks g = godambe_blocks(sim, refit, j);
          out.beta[rep].push_back(refit.marginals[j].beta);
          out.J_beta.push_back(g.J_inv_beta);
          out.J_b.push_back(g.b_covariance());
        }
      }
      out.ok = true;
    } catch (const std::exception&) {
      out.ok = false;
    }
  });
  std::vector<UnconditionalAV> res(d);
  int ok = 0;
  for (const auto& dr : draws) ok += dr.ok ? 1 : 0;
  const int failures = n_mc - ok;
  if (failures > n_mc / 20) throw FitError("more than 5% of Monte Carlo refits failed");
  for (std::size_t j = 0; j < d; ++j) {
    const Eigen::Index k = design.marginals[j].k();
    UnconditionalAV& u = res[j];
    u.mean_J_inv_beta = MatrixXd::Zero(k, k);
    u.mean_J_inv_b = MatrixXd::Zero(q, q);
    VectorXd mean[2] = {VectorXd::Zero(k), VectorXd::Zero(k)};
    for (const auto& dr : draws) {
      if (!dr.ok) continue;
      for (int rep = 0; rep < 2; ++rep) {
        u.mean_J_inv_beta += dr.J_beta[rep * d + j];
        u.mean_J_inv_b += dr.J_b[rep * d + j];
        mean[rep] += dr.beta[rep][j];
      }
    }
    u.mean_J_inv_beta /= 2.0 * ok;
    u.mean_J_inv_b /= 2.0 * ok;
    mean[0] /= ok;
    mean[1] /= ok;
    // Cov(beta_1, beta_2 | same B) estimates the variance of E[beta_hat | B]
    MatrixXd C = MatrixXd::Zero(k, k);
    for (const auto& dr : draws) {
      if (!dr.ok) continue;
      C += (dr.beta[0][j] - mean[0]) * (dr.beta[1][j] - mean[1]).transpose();
    }
    if (ok > 1) C /= (ok - 1);
    u.var_beta = 0.5 * (C + C.transpose());
    u.AV_beta = u.mean_J_inv_beta + u.var_beta;
    u.AV_b = u.mean_J_inv_b + Sigma(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) * MatrixXd::Identity(q, q);
    u.draws = ok;
    u.failures = failures;
  }
  return res;
}

struct RegularityReport {
  VectorXd psi_mean;  // (psi_beta, psi_b) averaged over draws at the truth
  VectorXd psi_se;
  double max_abs_z = 0.0;              // max |mean / se|
  double jacobian_max_rel_error = 0.0; // analytic vs finite-difference
  double min_eig_V = 0.0;              // variability, identifiable coordinates
  double min_sv_S = 0.0;               // sensitivity, identifiable coordinates
};

/// Diagnostics for marginal j at a known parameter state `truth`.
inline RegularityReport check_regularity(const ModelDesign& design, const FitResult& truth, std::size_t j, int n_mc,
                                         std::uint64_t seed) {
  RegularityReport rep;
  const FittedMarginal fm0 = fitted_marginal(design, truth, j);
  const Eigen::Index k = fm0.problem.k(), q = fm0.problem.q_total();
  const VectorXd& beta = truth.marginals[j].beta;
  VectorXd sum = VectorXd::Zero(k + q), sumsq = VectorXd::Zero(k + q);
  ModelDesign last;
  for (int r = 0; r < n_mc; ++r) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(r), 1);
    const ModelDesign sim = simulate_responses(design, truth, rng);
    const FittedMarginal fm = fitted_marginal(sim, truth, j);
    const InferenceFunctions f = inference_functions(fm.problem, beta, fm.b);
    VectorXd v(k + q);
    v.head(k) = f.psi_beta;
    Eigen::Index off = k;
    for (const auto& pb : f.psi_b) {
      v.segment(off, pb.size()) = pb;
      off += pb.size();
    }
    sum += v;
    sumsq += v.cwiseProduct(v);
    if (r + 1 == n_mc) last = sim;
  }
  rep.psi_mean = sum / n_mc;
  rep.psi_se = ((sumsq / n_mc - rep.psi_mean.cwiseProduct(rep.psi_mean)) * n_mc / std::max(1, n_mc - 1) / n_mc).cwiseSqrt();
  for (Eigen::Index i = 0; i < rep.psi_mean.size(); ++i)
    if (rep.psi_se[i] > 0.0) rep.max_abs_z = std::max(rep.max_abs_z, std::abs(rep.psi_mean[i]) / rep.psi_se[i]);

  // Jacobian check on the last simulated data set
  const FittedMarginal fm = fitted_marginal(n_mc > 0 ? last : design, truth, j);
  const MarginalProblem& p = fm.problem;
  const LinearState st = p.state(beta, fm.b);
  const MatrixXd J = p.jacobian(p.weights(st.mu, false));
  auto psi_vec = [&](const VectorXd& th) {
    std::vector<VectorXd> b;
    Eigen::Index off = k;
    for (auto* c : p.comps) {
      b.push_back(th.segment(off, c->q));
      off += c->q;
    }
    const InferenceFunctions f = inference_functions(p, th.head(k), b);
    VectorXd v(k + q);
    v.head(k) = f.psi_beta;
    off = k;
    for (const auto& pb : f.psi_b) {
      v.segment(off, pb.size()) = pb;
      off += pb.size();
    }
    return v;
  };
  VectorXd th(k + q);
  th.head(k) = beta;
  {
    Eigen::Index off = k;
    for (const auto& bb : fm.b) {
      th.segment(off, bb.size()) = bb;
      off += bb.size();
    }
  }
  double max_rel = 0.0;
  for (Eigen::Index a = 0; a < k + q; ++a) {
    const double h = 1e-6 * std::max(1.0, std::abs(th[a]));
    VectorXd tp = th, tm = th;
    tp[a] += h;
    tm[a] -= h;
    const VectorXd col = (psi_vec(tp) - psi_vec(tm)) / (2.0 * h);
    const double scale = std::max(J.col(a).lpNorm<Eigen::Infinity>(), 1e-12);
    max_rel = std::max(max_rel, (col - J.col(a)).lpNorm<Eigen::Infinity>() / scale);
  }
  rep.jacobian_max_rel_error = max_rel;

  GodambeOptions go;
  go.mode = GodambeMode::model_based;
  const GodambeBlocks g = godambe_blocks(fm0.problem, beta, fm0.b, truth.marginals[j].lambda, go);
  const Eigen::Index kk = g.k(), qq = g.q();
  MatrixXd V(kk + qq, kk + qq), S(kk + qq, kk + qq);
  V << g.V_beta_beta, g.V_beta_b, g.V_b_beta, g.V_bb;
  S << g.S_beta_beta, g.S_beta_b, g.S_b_beta, g.S_bb;
  rep.min_eig_V = Eigen::SelfAdjointEigenSolver<MatrixXd>(V).eigenvalues().minCoeff();
  rep.min_sv_S = Eigen::JacobiSVD<MatrixXd>(S).singularValues().minCoeff();
  return rep;
}

}  // namespace cglmm
