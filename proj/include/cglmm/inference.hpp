#pragma once

// Linear predictors, the conditional inference functions psi*_beta and
// psi*_b, their Jacobians and the mean-zero projection.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "family.hpp"
#include "model.hpp"

namespace cglmm {

struct LinearState {
  VectorXd eta;
  VectorXd mu;
};

/// v - mean(v)
inline VectorXd project_zero_mean(const VectorXd& v) {
  if (v.size() == 0) return v;
  return (v.array() - v.mean()).matrix();
}

/// One marginal model with the random components that enter its linear
/// predictor directly.
struct MarginalProblem {
  const MarginalDesign* design = nullptr;
  std::vector<const ClusterComponent*> comps;

  MarginalProblem() = default;
  MarginalProblem(const MarginalDesign& m, std::vector<const ClusterComponent*> c) : design(&m), comps(std::move(c)) {}

  Eigen::Index n() const { return design->n(); }
  Eigen::Index k() const { return design->k(); }
  Eigen::Index q_total() const {
    Eigen::Index s = 0;
    for (auto* c : comps) s += c->q;
    return s;
  }

  /// eta_i = (x_i0 beta_0 + sum_r b_r[c_r(i)]) + sum_{l>=1} x_il beta_l.
  /// The intercept and random offsets are added before the covariate terms so
  /// that an exact shift between the two leaves eta unchanged bit for bit.
  VectorXd eta(const VectorXd& beta, const std::vector<VectorXd>& b) const {
    const MatrixXd& X = design->X;
    VectorXd out(n());
    for (Eigen::Index i = 0; i < n(); ++i) {
      double v = X(i, 0) * beta[0];
      for (std::size_t r = 0; r < comps.size(); ++r) v += b[r][comps[r]->index[i]];
      for (Eigen::Index l = 1; l < X.cols(); ++l) v += X(i, l) * beta[l];
      out[i] = v;
    }
    return out;
  }

  VectorXd mu(const VectorXd& eta) const {
    VectorXd out(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) out[i] = link_invert(design->link, eta[i]);
    return out;
  }

  LinearState state(const VectorXd& beta, const std::vector<VectorXd>& b) const {
    LinearState s;
    s.eta = eta(beta, b);
    s.mu = mu(s.eta);
    return s;
  }

  /// Sum of unit deviances; +inf when some mean leaves the mean space.
  double deviance(const VectorXd& eta) const {
    double total = 0.0;
    try {
      for (Eigen::Index i = 0; i < eta.size(); ++i) {
        const double m = link_invert(design->link, eta[i]);
        total += unit_deviance(design->family, design->y[i], m, design->trials[i]);
      }
    } catch (const DomainError&) {
      return std::numeric_limits<double>::infinity();
    }
    return std::isfinite(total) ? total : std::numeric_limits<double>::infinity();
  }

  double log_likelihood(const VectorXd& eta, double lambda) const {
    double total = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i)
      total += log_density(design->family, design->y[i], link_invert(design->link, eta[i]), lambda, design->trials[i]);
    return total;
  }

  /// u_i = (dd/dmu) / g'(mu) at observation i.
  double score(Eigen::Index i, double mu) const {
    return deviance_dmu(design->family, design->y[i], mu, design->trials[i]) / link_derivative(design->link, mu);
  }

  /// d u_i / d eta_i: observed (exact derivative) or expected (2 / (V g'^2)).
  double weight(Eigen::Index i, double mu, bool expected) const {
    const FamilyId f = design->family;
    const double m = design->trials[i];
    const double g1 = link_derivative(design->link, mu);
    if (expected) return 2.0 / (variance_function(f, mu, m) * g1 * g1);
    const double g2 = link_second_derivative(design->link, mu);
    const double d1 = deviance_dmu(f, design->y[i], mu, m);
    const double d2 = deviance_d2mu(f, design->y[i], mu, m);
    return (d2 * g1 - d1 * g2) / (g1 * g1 * g1);
  }

  VectorXd scores(const VectorXd& mu) const {
    VectorXd u(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) u[i] = score(i, mu[i]);
    return u;
  }

  VectorXd weights(const VectorXd& mu, bool expected) const {
    VectorXd h(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) h[i] = weight(i, mu[i], expected);
    return h;
  }

  /// Accumulates per-observation values into per-cluster sums of component r.
  VectorXd cluster_sums(std::size_t r, const VectorXd& v) const {
    VectorXd s = VectorXd::Zero(comps[r]->q);
    for (Eigen::Index i = 0; i < v.size(); ++i) s[comps[r]->index[i]] += v[i];
    return s;
  }

  /// Jacobian of (psi_beta, psi_b) with respect to (beta, b) given per-observation
  /// weights h: [[X'HX, X'HZ], [Z'HX, Z'HZ]].
  MatrixXd jacobian(const VectorXd& h) const {
    const MatrixXd& X = design->X;
    const Eigen::Index k = X.cols(), q = q_total();
    MatrixXd J = MatrixXd::Zero(k + q, k + q);
    J.topLeftCorner(k, k) = X.transpose() * h.asDiagonal() * X;
    Eigen::Index off = k;
    std::vector<Eigen::Index> offsets;
    for (auto* c : comps) {
      offsets.push_back(off);
      off += c->q;
    }
    for (Eigen::Index i = 0; i < n(); ++i) {
      for (std::size_t r = 0; r < comps.size(); ++r) {
        const Eigen::Index cr = offsets[r] + comps[r]->index[i];
        for (Eigen::Index l = 0; l < k; ++l) {
          const double v = h[i] * X(i, l);
          J(l, cr) += v;
          J(cr, l) += v;
        }
        for (std::size_t s = 0; s < comps.size(); ++s) J(cr, offsets[s] + comps[s]->index[i]) += h[i];
      }
    }
    return J;
  }
};

struct InferenceFunctions {
  VectorXd psi_beta;
  std::vector<VectorXd> psi_b;  // per component

  double max_norm() const {
    double m = psi_beta.size() ? psi_beta.lpNorm<Eigen::Infinity>() : 0.0;
    for (const auto& p : psi_b)
      if (p.size()) m = std::max(m, p.lpNorm<Eigen::Infinity>());
    return m;
  }
};

inline InferenceFunctions inference_functions(const MarginalProblem& p, const VectorXd& beta,
                                              const std::vector<VectorXd>& b) {
  const LinearState s = p.state(beta, b);
  const VectorXd u = p.scores(s.mu);
  InferenceFunctions out;
  out.psi_beta = p.design->X.transpose() * u;
  for (std::size_t r = 0; r < p.comps.size(); ++r) out.psi_b.push_back(p.cluster_sums(r, u));
  return out;
}

namespace detail {

/// Interprets a dense 0/1 allocation matrix as a cluster component.
inline ClusterComponent component_from_matrix(const MatrixXd& Z) {
  ClusterComponent c;
  c.name = "cluster";
  c.q = static_cast<int>(Z.cols());
  c.index.resize(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    int found = -1;
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
      if (Z(i, j) == 1.0 && found < 0) {
        found = static_cast<int>(j);
      } else if (Z(i, j) != 0.0) {
        found = -2;
      }
    }
    if (found < 0) throw DataError("allocation row " + std::to_string(i + 1) + " must contain exactly one 1");
    c.index[static_cast<std::size_t>(i)] = found;
  }
  for (int j = 0; j < c.q; ++j) c.labels.push_back(std::to_string(j + 1));
  return c;
}

inline MarginalDesign dense_design(const VectorXd& y, const MatrixXd& X, FamilyId family, LinkId link,
                                   const VectorXd& trials) {
  MarginalDesign m;
  m.family = family;
  m.link = link;
  m.X = X;
  m.y = y;
  m.trials = trials.size() ? trials : VectorXd::Ones(X.rows());
  return m;
}

}  // namespace detail

/// eta = X beta + Z b and mu = g^{-1}(eta) for a single 0/1 allocation matrix.
inline LinearState linear_predictor(const VectorXd& beta, const VectorXd& b, const MatrixXd& X, const MatrixXd& Z,
                                    LinkId link) {
  const ClusterComponent c = detail::component_from_matrix(Z);
  MarginalDesign m;
  m.link = link;
  m.X = X;
  const MarginalProblem p(m, {&c});
  return p.state(beta, {b});
}

inline InferenceFunctions inference_functions(const VectorXd& beta, const VectorXd& b, const VectorXd& y,
                                              const MatrixXd& X, const MatrixXd& Z, FamilyId family, LinkId link,
                                              const VectorXd& trials = VectorXd()) {
  const ClusterComponent c = detail::component_from_matrix(Z);
  const MarginalDesign m = detail::dense_design(y, X, family, link, trials);
  return inference_functions(MarginalProblem(m, {&c}), beta, {b});
}

}  // namespace cglmm
