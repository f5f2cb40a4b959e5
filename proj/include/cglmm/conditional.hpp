#pragma once

// Conditional-inference fit: random components are predicted by maximizing
// the conditional likelihood given the fixed effects, projected onto the
// mean-zero subspace, and alternated with fixed-effect and dispersion
// updates.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "covariance.hpp"
#include "detail/linalg.hpp"
#include "fit_result.hpp"
#include "inference.hpp"
#include "model.hpp"

namespace cglmm {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kOffsetClamp = 30.0;

namespace detail {

/// Solves H x = -g with H symmetric; falls back to `H_fallback` when H is not
/// positive definite. Returns false when neither is.
inline bool newton_direction(const MatrixXd& H, const MatrixXd& H_fallback, const VectorXd& g, VectorXd& step) {
  Eigen::LLT<MatrixXd> llt(H);
  if (llt.info() == Eigen::Success) {
    step = -llt.solve(g);
    if (step.allFinite()) return true;
  }
  Eigen::LDLT<MatrixXd> ldlt(H_fallback);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    step = -ldlt.solve(g);
    if (step.allFinite()) return true;
  }
  return false;
}

inline std::vector<std::vector<int>> members(const ClusterComponent& c) {
  std::vector<std::vector<int>> m(static_cast<std::size_t>(c.q));
  for (std::size_t i = 0; i < c.index.size(); ++i) m[c.index[i]].push_back(static_cast<int>(i));
  return m;
}

/// Direction in which the unconstrained conditional likelihood of a cluster
/// increases without bound: -1 / +1 when every response sits on the lower /
/// upper support boundary under a link whose range is unbounded, else 0.
inline int degenerate_direction(const MarginalDesign& m, const std::vector<int>& rows) {
  if (rows.empty()) return 0;
  const bool log_like = m.link == LinkId::log || m.link == LinkId::logit;
  if (!log_like) return 0;
  const bool lower = (m.family == FamilyId::poisson || m.family == FamilyId::binomial) &&
                     std::all_of(rows.begin(), rows.end(), [&](int i) { return m.y[i] == 0.0; });
  if (lower) return -1;
  const bool upper = m.family == FamilyId::binomial && m.link == LinkId::logit &&
                     std::all_of(rows.begin(), rows.end(), [&](int i) { return m.y[i] == 1.0; });
  return upper ? 1 : 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fixed effects and dispersion

struct BetaUpdate {
  VectorXd beta;
  double lambda = 1.0;
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline double update_lambda(const MarginalProblem& p, double deviance) {
  if (p.design->fixed_dispersion) return *p.design->fixed_dispersion;
  return dispersion_mle(p.design->family, deviance, static_cast<double>(p.n()));
}

/// Damped Newton on psi*_beta with the random components held at `b`, then
/// the dispersion maximizing the conditional likelihood at the new beta.
inline BetaUpdate update_beta_lambda(const MarginalProblem& p, const std::vector<VectorXd>& b, VectorXd beta,
                                     const FitOptions& opts) {
  const MatrixXd& X = p.design->X;
  BetaUpdate out;
  VectorXd eta = p.eta(beta, b);
  double dev = p.deviance(eta);
  if (!std::isfinite(dev)) throw FitError("fixed-effect update started outside the mean space");
  for (int it = 0; it < opts.max_inner; ++it) {
    out.iterations = it + 1;
    const VectorXd mu = p.mu(eta);
    const VectorXd u = p.scores(mu);
    const VectorXd g = X.transpose() * u;
    if (g.lpNorm<Eigen::Infinity>() <= opts.inner_tol) {
      out.converged = true;
      break;
    }
    const MatrixXd Ho = X.transpose() * p.weights(mu, false).asDiagonal() * X;
    const MatrixXd He = X.transpose() * p.weights(mu, true).asDiagonal() * X;
    VectorXd step;
    if (!detail::newton_direction(Ho, He, g, step)) break;
    double t = 1.0;
    bool accepted = false;
    VectorXd beta_new, eta_new;
    double dev_new = dev;
    for (int h = 0; h <= opts.step_halving_max; ++h, t *= 0.5) {
      beta_new = beta + t * step;
      eta_new = p.eta(beta_new, b);
      dev_new = p.deviance(eta_new);
      if (dev_new <= dev) {
        accepted = true;
        break;
      }
    }
    const bool tiny = (t * step).lpNorm<Eigen::Infinity>() <= 1e-14 * (1.0 + beta.lpNorm<Eigen::Infinity>());
    if (!accepted || tiny) {
      // no further decrease possible at working precision
      out.converged = accepted || g.lpNorm<Eigen::Infinity>() <= 1e3 * opts.inner_tol;
      if (accepted) {
        beta = beta_new;
        eta = eta_new;
        dev = dev_new;
      }
      break;
    }
    beta = beta_new;
    eta = eta_new;
    dev = dev_new;
  }
  out.beta = beta;
  out.deviance = dev;
  out.lambda = update_lambda(p, dev);
  return out;
}

/// Fixed-effects-only GLM fit (b = 0) started from a weighted least-squares
/// step at mu0 = (y + mean(y)) / 2.
inline BetaUpdate fit_glm(const MarginalProblem& p, const FitOptions& opts) {
  const MarginalDesign& m = *p.design;
  const Eigen::Index n = p.n();
  const double ybar = m.y.mean();
  VectorXd z(n), w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mu0 = 0.5 * (m.y[i] + ybar);
    if (m.family == FamilyId::binomial) mu0 = std::clamp(mu0, 0.05, 0.95);
    if (m.family != FamilyId::normal) mu0 = std::max(mu0, 0.05);
    const double g1 = link_derivative(m.link, mu0);
    z[i] = link_apply(m.link, mu0) + (m.y[i] - mu0) * g1;
    w[i] = 1.0 / (variance_function(m.family, mu0, m.trials[i]) * g1 * g1);
  }
  const MatrixXd XtW = m.X.transpose() * w.asDiagonal();
  VectorXd beta = (XtW * m.X).ldlt().solve(XtW * z);
  std::vector<VectorXd> b0;
  for (auto* c : p.comps) b0.push_back(VectorXd::Zero(c->q));
  if (!std::isfinite(p.deviance(p.eta(beta, b0)))) {
    // fall back to an intercept-only start
    beta.setZero();
    beta[0] = link_apply(m.link, std::clamp(ybar, 0.05, m.family == FamilyId::binomial ? 0.95 : 1e300));
    if (m.family == FamilyId::normal) beta[0] = ybar;
  }
  return update_beta_lambda(p, b0, beta, opts);
}

// ---------------------------------------------------------------------------
// random components

struct PredictResult {
  std::vector<VectorXd> b;      // projected onto the mean-zero subspace
  std::vector<VectorXd> b_raw;  // unconstrained maximizer
  std::vector<std::vector<int>> degenerate;
  int iterations = 0;
  bool converged = true;
};

/// Maximizes the conditional likelihood over b at fixed beta, then projects
/// every component onto the mean-zero subspace. A single component is
/// solved cluster by cluster; several non-nested components jointly.
inline PredictResult predict_b(const MarginalProblem& p, const VectorXd& beta, std::vector<VectorXd> b,
                               const FitOptions& opts) {
  PredictResult out;
  const MarginalDesign& m = *p.design;
  const std::size_t R = p.comps.size();
  out.degenerate.assign(R, {});
  if (R == 1) {
    const auto groups = detail::members(*p.comps[0]);
    std::vector<VectorXd> zero{VectorXd::Zero(p.comps[0]->q)};
    const VectorXd eta0 = p.eta(beta, zero);
    VectorXd& bc = b[0];
    for (int c = 0; c < p.comps[0]->q; ++c) {
      const auto& rows = groups[c];
      const int dir = detail::degenerate_direction(m, rows);
      if (dir != 0) {
        bc[c] = dir * kOffsetClamp;
        out.degenerate[0].push_back(c);
        continue;
      }
      auto dev_at = [&](double v) {
        double s = 0.0;
        try {
          for (int i : rows) s += unit_deviance(m.family, m.y[i], link_invert(m.link, eta0[i] + v), m.trials[i]);
        } catch (const DomainError&) {
          return std::numeric_limits<double>::infinity();
        }
        return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
      };
      double v = std::clamp(bc[c], -kOffsetClamp, kOffsetClamp);
      double dev = dev_at(v);
      if (!std::isfinite(dev)) {
        v = 0.0;
        dev = dev_at(v);
      }
      bool ok = false;
      for (int it = 0; it < opts.max_inner; ++it) {
        out.iterations = std::max(out.iterations, it + 1);
        double g = 0.0, ho = 0.0, he = 0.0;
        for (int i : rows) {
          const double mu = link_invert(m.link, eta0[i] + v);
          g += p.score(i, mu);
          ho += p.weight(i, mu, false);
          he += p.weight(i, mu, true);
        }
        if (std::abs(g) <= opts.inner_tol) {
          ok = true;
          break;
        }
        const double hess = ho > 0.0 ? ho : he;
        double step = -g / hess;
        bool accepted = false;
        double vn = v, dn = dev;
        for (int h = 0; h <= opts.step_halving_max; ++h, step *= 0.5) {
          vn = std::clamp(v + step, -kOffsetClamp, kOffsetClamp);
          dn = dev_at(vn);
          if (dn <= dev) {
            accepted = true;
            break;
          }
        }
        if (!accepted || vn == v) {
          ok = std::abs(g) <= 1e3 * opts.inner_tol || std::abs(v) == kOffsetClamp;
          break;
        }
        v = vn;
        dev = dn;
      }
      if (std::abs(v) == kOffsetClamp) out.degenerate[0].push_back(c);
      if (!ok) out.converged = false;
      bc[c] = v;
    }
  } else {
    // joint Newton over the concatenated components; the directions that
    // move mass between components leave eta unchanged and are fixed by
    // augmenting the Hessian with their outer products
    const Eigen::Index k = p.k(), q = p.q_total();
    std::vector<Eigen::Index> offsets;
    Eigen::Index off = 0;
    for (auto* c : p.comps) {
      offsets.push_back(off);
      off += c->q;
    }
    MatrixXd N = MatrixXd::Zero(q, q);
    for (std::size_t r = 1; r < R; ++r) {
      VectorXd u = VectorXd::Zero(q);
      u.segment(offsets[0], p.comps[0]->q).setConstant(1.0 / p.comps[0]->q);
      u.segment(offsets[r], p.comps[r]->q).setConstant(-1.0 / p.comps[r]->q);
      N += u * u.transpose();
    }
    auto flatten = [&](const std::vector<VectorXd>& bs) {
      VectorXd v(q);
      for (std::size_t r = 0; r < R; ++r) v.segment(offsets[r], bs[r].size()) = bs[r];
      return v;
    };
    auto split = [&](const VectorXd& v) {
      std::vector<VectorXd> bs;
      for (std::size_t r = 0; r < R; ++r) bs.push_back(v.segment(offsets[r], p.comps[r]->q));
      return bs;
    };
    VectorXd v = flatten(b);
    double dev = p.deviance(p.eta(beta, b));
    if (!std::isfinite(dev)) {
      v.setZero();
      dev = p.deviance(p.eta(beta, split(v)));
    }
    bool ok = false;
    for (int it = 0; it < opts.max_inner; ++it) {
      out.iterations = it + 1;
      const std::vector<VectorXd> bs = split(v);
      const VectorXd mu = p.mu(p.eta(beta, bs));
      const VectorXd u = p.scores(mu);
      VectorXd g(q);
      for (std::size_t r = 0; r < R; ++r) g.segment(offsets[r], p.comps[r]->q) = p.cluster_sums(r, u);
      if (g.lpNorm<Eigen::Infinity>() <= opts.inner_tol) {
        ok = true;
        break;
      }
      const MatrixXd Ho = p.jacobian(p.weights(mu, false)).bottomRightCorner(q, q) + N;
      const MatrixXd He = p.jacobian(p.weights(mu, true)).bottomRightCorner(q, q) + N;
      VectorXd step;
      if (!detail::newton_direction(Ho, He, g, step)) break;
      bool accepted = false;
      VectorXd vn = v;
      double dn = dev;
      for (int h = 0; h <= opts.step_halving_max; ++h, step *= 0.5) {
        vn = (v + step).cwiseMax(-kOffsetClamp).cwiseMin(kOffsetClamp);
        dn = p.deviance(p.eta(beta, split(vn)));
        if (dn <= dev) {
          accepted = true;
          break;
        }
      }
      if (!accepted || vn == v) {
        ok = g.lpNorm<Eigen::Infinity>() <= 1e3 * opts.inner_tol;
        break;
      }
      v = vn;
      dev = dn;
    }
    (void)k;
    out.converged = ok;
    b = split(v);
    for (std::size_t r = 0; r < R; ++r)
      for (int c = 0; c < p.comps[r]->q; ++c)
        if (std::abs(b[r][c]) == kOffsetClamp) out.degenerate[r].push_back(c);
  }
  out.b_raw = b;
  for (auto& br : b) br = project_zero_mean(br);
  out.b = std::move(b);
  return out;
}

/// Splits the temporary child-level prediction into the child part and the
/// parent part: b2 = per-parent average of b_bar1, b1 = b_bar1 - Z2 b2.
inline std::pair<VectorXd, VectorXd> predict_nested(const VectorXd& b_bar1, const std::vector<int>& parent_of, int q2) {
  VectorXd b2 = VectorXd::Zero(q2);
  VectorXd count = VectorXd::Zero(q2);
  for (Eigen::Index c = 0; c < b_bar1.size(); ++c) {
    b2[parent_of[c]] += b_bar1[c];
    count[parent_of[c]] += 1.0;
  }
  for (int p = 0; p < q2; ++p) {
    if (count[p] == 0.0) throw DataError("parent cluster " + std::to_string(p + 1) + " has no child clusters");
    b2[p] /= count[p];
  }
  VectorXd b1(b_bar1.size());
  for (Eigen::Index c = 0; c < b_bar1.size(); ++c) b1[c] = b_bar1[c] - b2[parent_of[c]];
  return {b1, b2};
}

// ---------------------------------------------------------------------------
// alternating algorithm

namespace detail {

/// Joint damped Newton on (beta, a) with b_r = Q_r a_r + const, which keeps
/// every component on its mean-zero subspace.
inline bool polish_joint(const MarginalProblem& p, VectorXd& beta, std::vector<VectorXd>& b, const FitOptions& opts) {
  const Eigen::Index k = p.k(), q = p.q_total();
  std::vector<MatrixXd> bases;
  Eigen::Index cols = 0;
  for (auto* c : p.comps) {
    bases.push_back(zero_mean_basis(c->q));
    cols += c->q - 1;
  }
  MatrixXd T = MatrixXd::Zero(k + q, k + cols);
  T.topLeftCorner(k, k).setIdentity();
  Eigen::Index ro = k, co = k;
  for (const auto& B : bases) {
    T.block(ro, co, B.rows(), B.cols()) = B;
    ro += B.rows();
    co += B.cols();
  }
  auto gradient = [&](const VectorXd& mu) {
    const VectorXd u = p.scores(mu);
    VectorXd g(k + q);
    g.head(k) = p.design->X.transpose() * u;
    Eigen::Index o = k;
    for (std::size_t r = 0; r < p.comps.size(); ++r) {
      g.segment(o, p.comps[r]->q) = p.cluster_sums(r, u);
      o += p.comps[r]->q;
    }
    return g;
  };
  double dev = p.deviance(p.eta(beta, b));
  Eigen::Index off = k;
  for (int it = 0; it < opts.max_inner; ++it) {
    const VectorXd mu = p.mu(p.eta(beta, b));
    const VectorXd g = gradient(mu);
    const double gnorm = g.lpNorm<Eigen::Infinity>();
    if (gnorm <= opts.inner_tol) return true;
    const VectorXd gt = T.transpose() * g;
    const MatrixXd Ho = T.transpose() * p.jacobian(p.weights(mu, false)) * T;
    const MatrixXd He = T.transpose() * p.jacobian(p.weights(mu, true)) * T;
    VectorXd step;
    if (!newton_direction(Ho, He, gt, step)) return false;
    VectorXd full = T * step;
    bool accepted = false;
    VectorXd beta_n;
    std::vector<VectorXd> b_n;
    double dn = dev;
    for (int h = 0; h <= opts.step_halving_max; ++h, full *= 0.5) {
      beta_n = beta + full.head(k);
      b_n = b;
      off = k;
      for (std::size_t r = 0; r < p.comps.size(); ++r) {
        b_n[r] += full.segment(off, p.comps[r]->q);
        off += p.comps[r]->q;
      }
      const VectorXd eta_n = p.eta(beta_n, b_n);
      dn = p.deviance(eta_n);
      if (dn <= dev) {
        accepted = true;
        break;
      }
      // near the root the deviance change is below rounding; accept when the
      // inference functions still shrink
      if (std::isfinite(dn) && dn - dev <= 1e-12 * (1.0 + std::abs(dev)) &&
          gradient(p.mu(eta_n)).lpNorm<Eigen::Infinity>() < gnorm) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return gnorm <= 10.0 * opts.inner_tol;
    const bool tiny = full.lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + beta.lpNorm<Eigen::Infinity>());
    beta = beta_n;
    b = b_n;
    dev = dn;
    if (tiny) return gnorm <= 10.0 * opts.inner_tol;
  }
  return false;
}

inline double max_abs_diff(const VectorXd& a, const VectorXd& b) {
  return a.size() ? (a - b).lpNorm<Eigen::Infinity>() : 0.0;
}

}  // namespace detail

/// Alternating fit of one marginal model; `start` (optional) warm-starts
/// beta, lambda and b.
inline MarginalFit fit_marginal(const MarginalProblem& p, const FitOptions& opts, const MarginalFit* start = nullptr) {
  MarginalFit mf;
  VectorXd beta;
  double lambda;
  std::vector<VectorXd> b;
  if (start) {
    beta = start->beta;
    lambda = start->lambda;
    b = start->b;
  } else {
    const BetaUpdate glm = fit_glm(p, opts);
    beta = glm.beta;
    lambda = glm.lambda;
    for (auto* c : p.comps) b.push_back(VectorXd::Zero(c->q));
  }
  std::vector<VectorXd> b_raw = b;
  PredictResult pr;
  for (int it = 0; it < opts.max_outer; ++it) {
    mf.iterations = it + 1;
    pr = predict_b(p, beta, b_raw, opts);
    const BetaUpdate bu = update_beta_lambda(p, pr.b, beta, opts);
    double change = std::max(detail::max_abs_diff(bu.beta, beta), std::abs(bu.lambda - lambda));
    for (std::size_t r = 0; r < b.size(); ++r) change = std::max(change, detail::max_abs_diff(pr.b[r], b[r]));
    mf.trace.push_back(change);
    beta = bu.beta;
    lambda = bu.lambda;
    b = pr.b;
    // warm start for the next prediction: raw maximizer shifted by the
    // intercept change so that eta is preserved
    b_raw = pr.b_raw;
    if (change < opts.outer_tol) {
      mf.converged = true;
      break;
    }
  }
  mf.degenerate = pr.degenerate;
  const bool clamped = std::any_of(mf.degenerate.begin(), mf.degenerate.end(), [](const auto& v) { return !v.empty(); });
  if (opts.polish && !clamped) {
    VectorXd beta_p = beta;
    std::vector<VectorXd> b_p = b;
    if (detail::polish_joint(p, beta_p, b_p, opts)) {
      beta = beta_p;
      b = b_p;
      const double dev = p.deviance(p.eta(beta, b));
      lambda = update_lambda(p, dev);
    }
  }
  for (auto& br : b) br = project_zero_mean(br);
  mf.beta = beta;
  mf.lambda = lambda;
  mf.b = b;
  return mf;
}

/// Fits every marginal on the finest random components, splits nested
/// predictions up their chains and estimates the random-component covariance.
inline FitResult fit_conditional(const ModelDesign& design, const FitOptions& opts = {},
                                 const FitResult* start = nullptr) {
  FitResult res;
  res.method = "condinf";
  const std::vector<int> fitted = design.fitted_components();
  std::vector<const ClusterComponent*> comps;
  for (int r : fitted) comps.push_back(&design.components[r]);
  res.converged = true;
  for (std::size_t j = 0; j < design.marginals.size(); ++j) {
    const MarginalProblem p(design.marginals[j], comps);
    MarginalFit warm;
    const MarginalFit* ws = nullptr;
    if (start) {
      warm = start->marginals[j];
      std::vector<VectorXd> bf;
      for (int r : fitted) bf.push_back(chain_expand(design, r, warm.b));
      warm.b = bf;
      ws = &warm;
    }
    MarginalFit mf = fit_marginal(p, opts, ws);
    // distribute the fitted-level predictions over all components
    std::vector<VectorXd> all(design.components.size());
    for (std::size_t f = 0; f < fitted.size(); ++f) {
      int cur = fitted[f];
      VectorXd v = mf.b[f];
      while (design.components[cur].parent >= 0) {
        const int par = design.components[cur].parent;
        auto [child, parent] = predict_nested(v, design.components[cur].parent_of, design.components[par].q);
        all[cur] = child;
        v = parent;
        cur = par;
      }
      all[cur] = v;
    }
    for (std::size_t r = 0; r < all.size(); ++r) {
      if (std::find(fitted.begin(), fitted.end(), static_cast<int>(r)) != fitted.end()) continue;
      const double m = all[r].mean();
      all[r].array() -= m;
      mf.beta[0] += m;
    }
    mf.b = std::move(all);
    res.converged = res.converged && mf.converged;
    res.iterations = std::max(res.iterations, mf.iterations);
    res.marginals.push_back(std::move(mf));
  }
  if (opts.estimate_covariance) estimate_random_covariance(design, res);
  return res;
}

inline FitResult fit(const ModelSpec& model, const Dataset& data, const FitOptions& opts = {}) {
  const ValidationReport rep = validate(model, data);
  if (!rep.ok()) {
    std::string msg = "validation failed";
    for (const auto& s : rep.messages()) msg += "\n  " + s;
    throw DataError(msg);
  }
  return fit_conditional(build_design(model, data), opts);
}

}  // namespace cglmm
