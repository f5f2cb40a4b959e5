#pragma once

// Marginal maximum likelihood by adaptive Gauss-Hermite quadrature for a
// univariate model with one Gaussian random intercept component.

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "conditional.hpp"
#include "detail/optimize.hpp"
#include "inference.hpp"
#include "model.hpp"

namespace cglmm {

struct GaussHermite {
  VectorXd nodes;    // roots of the physicists' Hermite polynomial
  VectorXd weights;  // for the weight function exp(-x^2)
};

/// Golub-Welsch nodes from the symmetric Jacobi matrix, refined and symmetrized.
inline GaussHermite gauss_hermite(int n) {
  MatrixXd J = MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
  GaussHermite gh;
  gh.nodes = es.eigenvalues();
  // Newton refinement on the orthonormal Hermite polynomial; Christoffel weights
  const auto hermite = [n](double x, double& pn, double& dpn, double& christoffel) {
    double p0 = 1.0 / std::pow(std::numbers::pi, 0.25), p1 = 0.0;
    christoffel = 0.0;
    for (int k = 1; k <= n; ++k) {
      christoffel += p0 * p0;
      const double p2 = p1;
      p1 = p0;
      p0 = x * std::sqrt(2.0 / k) * p1 - std::sqrt((k - 1.0) / k) * p2;
    }
    pn = p0;
    dpn = std::sqrt(2.0 * n) * p1;
  };
  gh.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = gh.nodes[i], pn, dpn, c;
    for (int it = 0; it < 3; ++it) {
      hermite(x, pn, dpn, c);
      if (dpn == 0.0) break;
      x -= pn / dpn;
    }
    hermite(x, pn, dpn, c);
    gh.nodes[i] = x;
    gh.weights[i] = 1.0 / c;
  }
  for (int i = 0; i < n / 2; ++i) {
    const int r = n - 1 - i;
    const double x = 0.5 * (gh.nodes[r] - gh.nodes[i]);
    const double w = 0.5 * (gh.weights[r] + gh.weights[i]);
    gh.nodes[i] = -x;
    gh.nodes[r] = x;
    gh.weights[i] = gh.weights[r] = w;
  }
  if (n % 2) gh.nodes[n / 2] = 0.0;
  return gh;
}

struct QuadratureResult {
  VectorXd beta;
  double sigma2 = 0.0;
  double lambda = 1.0;
  double log_likelihood = 0.0;
  bool converged = false;
  bool sigma_boundary = false;
};

namespace detail {

struct QuadratureModel {
  const MarginalDesign* m;
  std::vector<std::vector<int>> groups;
  VectorXd log_norm_fixed;  // log a(y) for dispersion-fixed families
  GaussHermite gh;
  VectorXd log_w;            // log(weight) + x^2

  double log_norm(Eigen::Index i, double lambda) const {
    if (m->dispersion_fixed() && log_norm_fixed.size()) return log_norm_fixed[i];
    return log_normalizer(m->family, m->y[i], lambda, m->trials[i]);
  }

  /// log of integral over b of prod_i f(y_i | eta0_i + b) N(b; 0, s2) for one cluster.
  double cluster_log_integral(const std::vector<int>& rows, const VectorXd& eta0, double s2, double lambda) const {
    const FamilyId f = m->family;
    const LinkId g = m->link;
    auto h = [&](double b) {
      double s = -0.5 * std::log(2.0 * std::numbers::pi * s2) - 0.5 * b * b / s2;
      for (int i : rows) {
        const double mu = link_invert(g, eta0[i] + b);
        s += log_norm(i, lambda) - unit_deviance(f, m->y[i], mu, m->trials[i]) / (2.0 * lambda);
      }
      return s;
    };
    // mode of h by damped Newton
    double b = 0.0, hb = h(b);
    double curv = 1.0 / s2;
    for (int it = 0; it < 50; ++it) {
      double g1 = -b / s2, g2o = -1.0 / s2, g2e = -1.0 / s2;
      for (int i : rows) {
        const double mu = link_invert(g, eta0[i] + b);
        const double d1 = deviance_dmu(f, m->y[i], mu, m->trials[i]) / link_derivative(g, mu);
        g1 -= d1 / (2.0 * lambda);
        const double gd = link_derivative(g, mu);
        const double v = variance_function(f, mu, m->trials[i]);
        g2e -= 1.0 / (lambda * v * gd * gd);
        const double d2 = deviance_d2mu(f, m->y[i], mu, m->trials[i]);
        const double gdd = link_second_derivative(g, mu);
        g2o -= (d2 * gd - deviance_dmu(f, m->y[i], mu, m->trials[i]) * gdd) / (gd * gd * gd) / (2.0 * lambda);
      }
      const double g2 = g2o < 0.0 ? g2o : g2e;
      curv = -g2;
      double step = -g1 / g2;
      double bn = b, hn = hb;
      bool ok = false;
      for (int k = 0; k < 40; ++k, step *= 0.5) {
        bn = b + step;
        try {
          hn = h(bn);
        } catch (const DomainError&) {
          continue;
        }
        if (hn >= hb) {
          ok = true;
          break;
        }
      }
      if (!ok) break;
      const bool small = std::abs(bn - b) < 1e-10 * (1.0 + std::abs(b));
      b = bn;
      hb = hn;
      if (small) break;
    }
    const double sd = 1.0 / std::sqrt(curv);
    double mx = -std::numeric_limits<double>::infinity();
    VectorXd terms(gh.nodes.size());
    for (Eigen::Index k = 0; k < gh.nodes.size(); ++k) {
      double v;
      try {
        v = h(b + std::sqrt(2.0) * sd * gh.nodes[k]);
      } catch (const DomainError&) {
        v = -std::numeric_limits<double>::infinity();
      }
      terms[k] = log_w[k] + v;
      mx = std::max(mx, terms[k]);
    }
    return std::log(std::sqrt(2.0) * sd) + mx + std::log((terms.array() - mx).exp().sum());
  }
};

}  // namespace detail

/// Maximizes the marginal likelihood of marginal `j` of the design over
/// (beta, log sigma^2, log lambda) with `nodes`-point adaptive Gauss-Hermite
/// quadrature per cluster.
inline QuadratureResult quadrature_mle(const ModelDesign& design, std::size_t j, int nodes = 20,
                                       const FitOptions& opts = {}) {
  if (design.components.size() != 1) throw ConfigError("quadrature requires a single cluster component");
  if (design.random_dist.kind != RandomDist::Kind::gaussian)
    throw ConfigError("quadrature requires gaussian random components");
  if (nodes < 20) throw ConfigError("quadrature needs at least 20 nodes");
  const MarginalDesign& m = design.marginals[j];
  const ClusterComponent& comp = design.components[0];
  detail::QuadratureModel qm{&m, detail::members(comp), VectorXd(), gauss_hermite(nodes), VectorXd()};
  qm.log_w = qm.gh.weights.array().log() + qm.gh.nodes.array().square();
  if (m.dispersion_fixed()) {
    const double lam = m.fixed_dispersion.value_or(1.0);
    qm.log_norm_fixed.resize(m.n());
    for (Eigen::Index i = 0; i < m.n(); ++i) qm.log_norm_fixed[i] = log_normalizer(m.family, m.y[i], lam, m.trials[i]);
  }
  const bool free_lambda = !m.dispersion_fixed();
  const Eigen::Index k = m.k();
  // start from the conditional fit
  const MarginalProblem p(m, {&comp});
  FitOptions fo = opts;
  const MarginalFit start = fit_marginal(p, fo);
  double s2_start = start.b[0].squaredNorm() / std::max(1, comp.q - 1);
  s2_start = std::max(s2_start, 1e-4);
  VectorXd theta(k + 1 + (free_lambda ? 1 : 0));
  theta.head(k) = start.beta;
  theta[k] = std::log(s2_start);
  if (free_lambda) theta[k + 1] = std::log(start.lambda);
  const double fixed_lambda = m.fixed_dispersion.value_or(1.0);
  std::vector<VectorXd> zero{VectorXd::Zero(comp.q)};
  auto negll = [&](const VectorXd& t) {
    const double lt = std::max(t[k], -30.0);
    if (t[k] > 30.0) return std::numeric_limits<double>::infinity();
    const double s2 = std::exp(lt);
    const double lam = free_lambda ? std::exp(t[k + 1]) : fixed_lambda;
    const VectorXd eta0 = p.eta(t.head(k), zero);
    double total = 0.0;
    try {
      for (const auto& rows : qm.groups) total += qm.cluster_log_integral(rows, eta0, s2, lam);
    } catch (const DomainError&) {
      return std::numeric_limits<double>::infinity();
    }
    return std::isfinite(total) ? -total : std::numeric_limits<double>::infinity();
  };
  detail::BfgsOptions bo;
  bo.grad_tol = 1e-7;
  bo.rel_step = 1e-6;
  const detail::MinimizeResult mr = detail::bfgs_minimize(negll, theta, bo);
  QuadratureResult out;
  out.beta = mr.x.head(k);
  out.sigma2 = std::exp(std::max(mr.x[k], -30.0));
  out.lambda = free_lambda ? std::exp(mr.x[k + 1]) : fixed_lambda;
  out.log_likelihood = -mr.value;
  out.converged = mr.converged;
  out.sigma_boundary = mr.x[k] <= -15.0;
  return out;
}

}  // namespace cglmm
