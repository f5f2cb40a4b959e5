#pragma once

// Small derivative-free-gradient optimizers: BFGS on central-difference
// gradients and a bracketed 1-D minimizer with Newton polish.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

namespace cglmm::detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MinimizeResult {
  VectorXd x;
  double value = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

struct BfgsOptions {
  double grad_tol = 1e-6;     // on the max-norm of the gradient
  double value_tol = 1e-13;   // relative change of the objective
  int max_iter = 500;
  double rel_step = 1e-5;     // finite-difference step relative to max(1, |x|)
};

inline VectorXd numeric_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                                 double rel_step) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = rel_step * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Minimizes f by BFGS with backtracking (Armijo) line search. Non-finite
/// objective values are treated as +infinity, so the line search backs off
/// from invalid regions.
inline MinimizeResult bfgs_minimize(const std::function<double(const VectorXd&)>& objective, VectorXd x,
                                    const BfgsOptions& opts = {}) {
  auto f = [&](const VectorXd& v) {
    const double val = objective(v);
    return std::isfinite(val) ? val : std::numeric_limits<double>::infinity();
  };
  MinimizeResult res;
  const Eigen::Index n = x.size();
  double fx = f(x);
  if (!std::isfinite(fx)) {
    res.x = x;
    res.value = fx;
    return res;
  }
  VectorXd g = numeric_gradient(f, x, opts.rel_step);
  MatrixXd H = MatrixXd::Identity(n, n);  // inverse Hessian approximation
  bool scaled = false;
  for (int it = 0; it < opts.max_iter; ++it) {
    res.iterations = it + 1;
    if (g.lpNorm<Eigen::Infinity>() < opts.grad_tol) {
      res.converged = true;
      break;
    }
    VectorXd p = -H * g;
    double slope = g.dot(p);
    if (!(slope < 0.0)) {
      H.setIdentity();
      p = -g;
      slope = -g.squaredNorm();
    }
    double t = 1.0;
    double ft = f(x + t * p);
    int backtracks = 0;
    while (!(ft <= fx + 1e-4 * t * slope) && backtracks < 60) {
      t *= 0.5;
      ft = f(x + t * p);
      ++backtracks;
    }
    if (!(ft <= fx)) break;
    const VectorXd s = t * p;
    const VectorXd xn = x + s;
    const VectorXd gn = numeric_gradient(f, xn, opts.rel_step);
    const VectorXd yv = gn - g;
    const double sy = s.dot(yv);
    const double rel_change = std::abs(fx - ft) / std::max(1.0, std::abs(fx));
    x = xn;
    g = gn;
    const double prev = fx;
    fx = ft;
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (!scaled) {
        H *= sy / yv.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const MatrixXd I = MatrixXd::Identity(n, n);
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    if (rel_change < opts.value_tol && prev - fx >= 0.0 && s.lpNorm<Eigen::Infinity>() < 1e-10) {
      res.converged = true;
      break;
    }
  }
  res.x = x;
  res.value = fx;
  res.grad_norm = g.lpNorm<Eigen::Infinity>();
  if (res.grad_norm < opts.grad_tol) res.converged = true;
  return res;
}

struct ScalarMinimum {
  double x = 0.0;
  double value = 0.0;
  bool at_lower = false;
  bool at_upper = false;
};

/// Minimizes f on [lo, hi] by Brent's method, then polishes with Newton
/// steps on central differences while they keep improving.
inline ScalarMinimum brent_newton_minimize(const std::function<double(double)>& f, double lo, double hi) {
  auto safe = [&](double v) {
    const double r = f(v);
    return std::isfinite(r) ? r : std::numeric_limits<double>::max();
  };
  auto [x, fx] = boost::math::tools::brent_find_minima(safe, lo, hi, 52);
  const double span = hi - lo;
  // Newton polish on central differences; near the minimum f is flat to
  // rounding, so a step is also accepted when it shrinks |f'|
  auto slope = [&](double v, double h) { return (safe(v + h) - safe(v - h)) / (2.0 * h); };
  for (int it = 0; it < 20; ++it) {
    const double h = 1e-5 * std::max(1.0, std::abs(x));
    const double fp = safe(x + h), fm = safe(x - h);
    const double d1 = (fp - fm) / (2.0 * h);
    const double d2 = (fp - 2.0 * fx + fm) / (h * h);
    if (!(d2 > 0.0)) break;
    const double xn = std::clamp(x - d1 / d2, lo, hi);
    const double fn = safe(xn);
    const bool flat = fn <= fx + 8.0 * std::numeric_limits<double>::epsilon() * std::abs(fx);
    if (!(fn < fx) && !(flat && std::abs(slope(xn, h)) < std::abs(d1))) break;
    const bool small = std::abs(xn - x) < 1e-14 * std::max(1.0, std::abs(x));
    x = xn;
    fx = fn;
    if (small) break;
  }
  ScalarMinimum out;
  out.x = x;
  out.value = fx;
  out.at_lower = x - lo <= 1e-7 * span;
  out.at_upper = hi - x <= 1e-7 * span;
  return out;
}

}  // namespace cglmm::detail
