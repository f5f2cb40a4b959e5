#pragma once

// Dispersion-model families and link functions.
//
// Every family is written in dispersion-model form
//     f(y; mu, lambda) = a(y; lambda) * exp(-d(y, mu) / (2 lambda))
// with unit deviance d, variance function V(mu) = 2 / d''(mu, mu) and the
// conditional variance lambda * V(mu). Binomial responses are proportions
// y = s / m with a known trial count m per observation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace cglmm {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FamilyId { normal, poisson, binomial, gamma, inverse_gaussian };
enum class LinkId { identity, log, logit, inverse, sqrt };
enum class LinkMode { apply, invert, derivative };

struct Interval {
  double lower;
  double upper;
  bool lower_open;
  bool upper_open;

  bool contains(double v) const {
    if (std::isnan(v)) return false;
    bool lo = lower_open ? v > lower : v >= lower;
    bool hi = upper_open ? v < upper : v <= upper;
    return lo && hi;
  }
};

struct FamilySpec {
  FamilyId id;
  Interval support;
  bool integer_support;  // lattice: integers (Poisson) or multiples of 1/m (binomial)
  Interval mean_space;
  bool dispersion_fixed;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline FamilySpec family_spec(FamilyId id) {
  switch (id) {
    case FamilyId::normal:
      return {id, {-kInf, kInf, true, true}, false, {-kInf, kInf, true, true}, false};
    case FamilyId::poisson:
      return {id, {0.0, kInf, false, true}, true, {0.0, kInf, true, true}, true};
    case FamilyId::binomial:
      return {id, {0.0, 1.0, false, false}, true, {0.0, 1.0, true, true}, true};
    case FamilyId::gamma:
      return {id, {0.0, kInf, true, true}, false, {0.0, kInf, true, true}, false};
    case FamilyId::inverse_gaussian:
      return {id, {0.0, kInf, true, true}, false, {0.0, kInf, true, true}, false};
  }
  throw ConfigError("unknown family");
}

inline std::string_view to_string(FamilyId id) {
  switch (id) {
    case FamilyId::normal: return "normal";
    case FamilyId::poisson: return "poisson";
    case FamilyId::binomial: return "binomial";
    case FamilyId::gamma: return "gamma";
    case FamilyId::inverse_gaussian: return "inverse_gaussian";
  }
  return "?";
}

inline std::string_view to_string(LinkId id) {
  switch (id) {
    case LinkId::identity: return "identity";
    case LinkId::log: return "log";
    case LinkId::logit: return "logit";
    case LinkId::inverse: return "inverse";
    case LinkId::sqrt: return "sqrt";
  }
  return "?";
}

inline FamilyId parse_family(std::string_view s) {
  if (s == "normal") return FamilyId::normal;
  if (s == "poisson") return FamilyId::poisson;
  if (s == "binomial") return FamilyId::binomial;
  if (s == "gamma") return FamilyId::gamma;
  if (s == "inverse_gaussian") return FamilyId::inverse_gaussian;
  throw ConfigError("unknown family '" + std::string(s) + "'");
}

inline LinkId parse_link(std::string_view s) {
  if (s == "identity") return LinkId::identity;
  if (s == "log") return LinkId::log;
  if (s == "logit") return LinkId::logit;
  if (s == "inverse") return LinkId::inverse;
  if (s == "sqrt") return LinkId::sqrt;
  throw ConfigError("unknown link '" + std::string(s) + "'");
}

/// Mean-space subset on which the link is defined.
inline Interval link_domain(LinkId id) {
  switch (id) {
    case LinkId::identity: return {-kInf, kInf, true, true};
    case LinkId::log: return {0.0, kInf, true, true};
    case LinkId::logit: return {0.0, 1.0, true, true};
    case LinkId::inverse: return {0.0, kInf, true, true};
    case LinkId::sqrt: return {0.0, kInf, true, true};
  }
  throw ConfigError("unknown link");
}

/// A link is compatible with a family when the image of g^{-1} over the
/// admissible linear predictors can be kept inside the family's mean space.
/// The identity link is accepted for positive-mean families; out-of-range
/// means are then rejected at fit time and trigger step halving.
inline bool link_compatible(FamilyId family, LinkId link) {
  const Interval ms = family_spec(family).mean_space;
  const Interval ld = link_domain(link);
  if (link == LinkId::identity) return true;
  // every admissible mean must lie in the link's domain
  return ld.lower <= ms.lower && ld.upper >= ms.upper;
}

namespace detail {

[[noreturn]] inline void domain_fail(std::string_view what, double v) {
  throw DomainError(std::string(what) + " (value " + std::to_string(v) + ")");
}

// x log(x / m) with the continuous extension 0 log 0 = 0
inline double xlogx_over(double x, double m) {
  return x == 0.0 ? 0.0 : x * std::log(x / m);
}

inline void check_mean(const FamilySpec& f, double mu) {
  if (!f.mean_space.contains(mu)) domain_fail("mean outside the family mean space", mu);
}

inline void check_support(const FamilySpec& f, double y, double trials) {
  if (!f.support.contains(y)) domain_fail("response outside the family support", y);
  if (f.id == FamilyId::poisson && y != std::floor(y))
    domain_fail("poisson response must be a non-negative integer", y);
  if (f.id == FamilyId::binomial) {
    double s = y * trials;
    if (std::abs(s - std::round(s)) > 1e-8 * std::max(1.0, trials))
      domain_fail("binomial proportion is not a multiple of 1/m", y);
  }
}

}  // namespace detail

inline bool in_support(FamilyId id, double y, double trials = 1.0) {
  try {
    detail::check_support(family_spec(id), y, trials);
    return true;
  } catch (const DomainError&) {
    return false;
  }
}

inline bool in_mean_space(FamilyId id, double mu) { return family_spec(id).mean_space.contains(mu); }

/// Unit deviance d(y, mu). For the binomial family `trials` is m and y is the
/// observed proportion.
inline double unit_deviance(FamilyId id, double y, double mu, double trials = 1.0) {
  const FamilySpec f = family_spec(id);
  detail::check_support(f, y, trials);
  detail::check_mean(f, mu);
  switch (id) {
    case FamilyId::normal: return (y - mu) * (y - mu);
    case FamilyId::poisson: return 2.0 * (detail::xlogx_over(y, mu) - (y - mu));
    case FamilyId::binomial:
      return 2.0 * trials *
             (detail::xlogx_over(y, mu) + detail::xlogx_over(1.0 - y, 1.0 - mu));
    case FamilyId::gamma: return 2.0 * ((y - mu) / mu - std::log(y / mu));
    case FamilyId::inverse_gaussian: return (y - mu) * (y - mu) / (y * mu * mu);
  }
  return 0.0;
}

/// V(mu); for the binomial family this includes the 1/m factor.
inline double variance_function(FamilyId id, double mu, double trials = 1.0) {
  const FamilySpec f = family_spec(id);
  detail::check_mean(f, mu);
  switch (id) {
    case FamilyId::normal: return 1.0;
    case FamilyId::poisson: return mu;
    case FamilyId::binomial: return mu * (1.0 - mu) / trials;
    case FamilyId::gamma: return mu * mu;
    case FamilyId::inverse_gaussian: return mu * mu * mu;
  }
  return 1.0;
}

/// dV/dmu
inline double variance_derivative(FamilyId id, double mu, double trials = 1.0) {
  switch (id) {
    case FamilyId::normal: return 0.0;
    case FamilyId::poisson: return 1.0;
    case FamilyId::binomial: return (1.0 - 2.0 * mu) / trials;
    case FamilyId::gamma: return 2.0 * mu;
    case FamilyId::inverse_gaussian: return 3.0 * mu * mu;
  }
  return 0.0;
}

/// dd/dmu. All cataloged families satisfy dd/dmu = -2 (y - mu) / V(mu).
inline double deviance_dmu(FamilyId id, double y, double mu, double trials = 1.0) {
  return -2.0 * (y - mu) / variance_function(id, mu, trials);
}

/// d^2 d / dmu^2 = 2 / V + 2 (y - mu) V' / V^2.
inline double deviance_d2mu(FamilyId id, double y, double mu, double trials = 1.0) {
  const double v = variance_function(id, mu, trials);
  return 2.0 / v + 2.0 * (y - mu) * variance_derivative(id, mu, trials) / (v * v);
}

/// log a(y; lambda). Exact for every cataloged family.
inline double log_normalizer(FamilyId id, double y, double lambda, double trials = 1.0) {
  const FamilySpec f = family_spec(id);
  detail::check_support(f, y, trials);
  if (f.dispersion_fixed) lambda = 1.0;
  if (!(lambda > 0.0)) detail::domain_fail("dispersion must be positive", lambda);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (id) {
    case FamilyId::normal: return -0.5 * std::log(two_pi * lambda);
    case FamilyId::poisson: return detail::xlogx_over(y, 1.0) - y - std::lgamma(y + 1.0);
    case FamilyId::binomial: {
      const double s = std::round(y * trials);
      return std::lgamma(trials + 1.0) - std::lgamma(s + 1.0) - std::lgamma(trials - s + 1.0) +
             trials * (detail::xlogx_over(y, 1.0) + detail::xlogx_over(1.0 - y, 1.0));
    }
    case FamilyId::gamma: {
      const double shape = 1.0 / lambda;
      return shape * std::log(shape) - shape - std::log(y) - std::lgamma(shape);
    }
    case FamilyId::inverse_gaussian: return -0.5 * std::log(two_pi * lambda * y * y * y);
  }
  return 0.0;
}

inline double log_density(FamilyId id, double y, double mu, double lambda, double trials = 1.0) {
  const FamilySpec f = family_spec(id);
  if (f.dispersion_fixed) lambda = 1.0;
  if (!(lambda > 0.0)) detail::domain_fail("dispersion must be positive", lambda);
  return log_normalizer(id, y, lambda, trials) - unit_deviance(id, y, mu, trials) / (2.0 * lambda);
}

// ---------------------------------------------------------------------------
// links

inline double link_apply(LinkId id, double mu) {
  if (!link_domain(id).contains(mu)) detail::domain_fail("mean outside the link domain", mu);
  switch (id) {
    case LinkId::identity: return mu;
    case LinkId::log: return std::log(mu);
    case LinkId::logit: return std::log(mu / (1.0 - mu));
    case LinkId::inverse: return 1.0 / mu;
    case LinkId::sqrt: return std::sqrt(mu);
  }
  return mu;
}

/// g^{-1}(eta). Throws DomainError when eta has no preimage in the link
/// domain (non-positive eta for the inverse and sqrt links).
inline double link_invert(LinkId id, double eta) {
  if (std::isnan(eta)) detail::domain_fail("linear predictor is NaN", eta);
  switch (id) {
    case LinkId::identity: return eta;
    case LinkId::log: return std::exp(eta);
    case LinkId::logit:
      return eta >= 0.0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
    case LinkId::inverse:
      if (!(eta > 0.0)) detail::domain_fail("inverse link needs a positive linear predictor", eta);
      return 1.0 / eta;
    case LinkId::sqrt:
      if (!(eta > 0.0)) detail::domain_fail("sqrt link needs a positive linear predictor", eta);
      return eta * eta;
  }
  return eta;
}

/// g'(mu)
inline double link_derivative(LinkId id, double mu) {
  if (!link_domain(id).contains(mu)) detail::domain_fail("mean outside the link domain", mu);
  switch (id) {
    case LinkId::identity: return 1.0;
    case LinkId::log: return 1.0 / mu;
    case LinkId::logit: return 1.0 / (mu * (1.0 - mu));
    case LinkId::inverse: return -1.0 / (mu * mu);
    case LinkId::sqrt: return 0.5 / std::sqrt(mu);
  }
  return 1.0;
}

/// g''(mu)
inline double link_second_derivative(LinkId id, double mu) {
  switch (id) {
    case LinkId::identity: return 0.0;
    case LinkId::log: return -1.0 / (mu * mu);
    case LinkId::logit: {
      const double v = mu * (1.0 - mu);
      return -(1.0 - 2.0 * mu) / (v * v);
    }
    case LinkId::inverse: return 2.0 / (mu * mu * mu);
    case LinkId::sqrt: return -0.25 / (mu * std::sqrt(mu));
  }
  return 0.0;
}

inline double link_eval(LinkId id, LinkMode mode, double value) {
  switch (mode) {
    case LinkMode::apply: return link_apply(id, value);
    case LinkMode::invert: return link_invert(id, value);
    case LinkMode::derivative: return link_derivative(id, value);
  }
  return value;
}

/// Dispersion MLE for fixed means given the deviance sum `dev` over `n`
/// observations. Poisson and binomial return 1.
inline double dispersion_mle(FamilyId id, double dev, double n) {
  switch (id) {
    case FamilyId::poisson:
    case FamilyId::binomial: return 1.0;
    case FamilyId::normal:
    case FamilyId::inverse_gaussian: return dev / n;
    case FamilyId::gamma: {
      // score in shape k = 1/lambda: n (log k - digamma(k)) - dev / 2 = 0,
      // solved by safeguarded Newton on log k
      if (!(dev > 0.0)) return 1e-12;
      const double target = dev / (2.0 * n);
      // log k - digamma(k) is decreasing from +inf to 0; start from the
      // asymptotic 1 / (2k) approximation
      double lk = std::log(1.0 / (2.0 * target));
      for (int it = 0; it < 100; ++it) {
        const double k = std::exp(lk);
        const double f = std::log(k) - boost::math::digamma(k) - target;
        const double df = 1.0 - k * boost::math::trigamma(k);  // d/dlogk
        double step = -f / df;
        if (!std::isfinite(step)) break;
        step = std::clamp(step, -2.0, 2.0);
        lk += step;
        if (std::abs(step) < 1e-14) break;
      }
      return std::exp(-lk);
    }
  }
  return 1.0;
}

}  // namespace cglmm
