#pragma once

// Seeded random streams and conditional response samplers.

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "family.hpp"

namespace cglmm {

using Rng = std::mt19937_64;

/// Generator keyed by (seed, replicate, stream); streams of different keys
/// are independent of the order in which they are created.
inline Rng make_rng(std::uint64_t seed, std::uint64_t replicate, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  return nd(rng);
}

/// Inverse Gaussian draw with mean mu and shape k (Michael, Schucany and Haas).
inline double inverse_gaussian_draw(Rng& rng, double mu, double shape) {
  const double z = standard_normal(rng);
  const double y = z * z;
  const double x = mu + mu * mu * y / (2.0 * shape) - mu / (2.0 * shape) * std::sqrt(4.0 * mu * shape * y + mu * mu * y * y);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  return unif(rng) <= mu / (mu + x) ? x : mu * mu / x;
}

/// Draws a response with conditional mean mu and variance lambda V(mu).
/// Binomial draws are returned as proportions of `trials`.
inline double sample_response(Rng& rng, FamilyId family, double mu, double lambda, double trials = 1.0) {
  switch (family) {
    case FamilyId::normal: return mu + std::sqrt(lambda) * standard_normal(rng);
    case FamilyId::poisson: {
      std::poisson_distribution<long long> pd(mu);
      return static_cast<double>(pd(rng));
    }
    case FamilyId::binomial: {
      std::binomial_distribution<long long> bd(static_cast<long long>(std::llround(trials)), mu);
      return static_cast<double>(bd(rng)) / trials;
    }
    case FamilyId::gamma: {
      std::gamma_distribution<double> gd(1.0 / lambda, mu * lambda);
      return gd(rng);
    }
    case FamilyId::inverse_gaussian: return inverse_gaussian_draw(rng, mu, 1.0 / lambda);
  }
  return mu;
}

/// Row vector with covariance Sigma: Gaussian, or multivariate t with `dof`
/// degrees of freedom scaled so its covariance is Sigma (dof > 2).
inline Eigen::VectorXd sample_random_effect(Rng& rng, const Eigen::MatrixXd& chol_lower, double dof = 0.0) {
  Eigen::VectorXd z(chol_lower.rows());
  for (Eigen::Index a = 0; a < z.size(); ++a) z[a] = standard_normal(rng);
  Eigen::VectorXd v = chol_lower * z;
  if (dof > 0.0) {
    std::chi_squared_distribution<double> chi(dof);
    v *= std::sqrt((dof - 2.0) / chi(rng));
  }
  return v;
}

}  // namespace cglmm
