#pragma once

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace cglmm::detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Symmetrizes M and raises its eigenvalues to at least `floor`.
inline MatrixXd floor_psd(const MatrixXd& M, double floor = 1e-10) {
  const MatrixXd sym = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  VectorXd ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Orthonormal basis (q x (q-1)) of the mean-zero subspace of R^q, built from
/// Helmert contrasts.
inline MatrixXd zero_mean_basis(Eigen::Index q) {
  MatrixXd Q = MatrixXd::Zero(q, q > 0 ? q - 1 : 0);
  for (Eigen::Index j = 1; j < q; ++j) {
    const double s = 1.0 / std::sqrt(static_cast<double>(j) * static_cast<double>(j + 1));
    Q.col(j - 1).head(j).setConstant(s);
    Q(j, j - 1) = -static_cast<double>(j) * s;
  }
  return Q;
}

/// Q^T v for the Helmert basis in O(q).
inline VectorXd zero_mean_coords(const VectorXd& v) {
  const Eigen::Index q = v.size();
  VectorXd a(q > 0 ? q - 1 : 0);
  double prefix = 0.0;
  for (Eigen::Index j = 1; j < q; ++j) {
    prefix += v[j - 1];
    const double s = 1.0 / std::sqrt(static_cast<double>(j) * static_cast<double>(j + 1));
    a[j - 1] = s * (prefix - static_cast<double>(j) * v[j]);
  }
  return a;
}

inline double logdet_spd(const MatrixXd& M) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw std::runtime_error("matrix is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

/// log N(x; 0, M) for symmetric positive definite M.
inline double log_normal_density(const VectorXd& x, const MatrixXd& M) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw std::runtime_error("covariance is not positive definite");
  const VectorXd z = llt.matrixL().solve(x);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * M_PI) + logdet + z.squaredNorm());
}

/// Lower-triangular factor with log-diagonal packed row-wise into a vector,
/// and its inverse map. Used to optimize over covariance matrices.
inline MatrixXd unpack_cholesky(const VectorXd& theta, Eigen::Index d) {
  MatrixXd L = MatrixXd::Zero(d, d);
  Eigen::Index p = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) L(i, j) = (i == j) ? std::exp(theta[p++]) : theta[p++];
  return L;
}

inline VectorXd pack_cholesky(const MatrixXd& Sigma) {
  const Eigen::Index d = Sigma.rows();
  Eigen::LLT<MatrixXd> llt(floor_psd(Sigma, 1e-12));
  const MatrixXd L = llt.matrixL();
  VectorXd theta(d * (d + 1) / 2);
  Eigen::Index p = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) theta[p++] = (i == j) ? std::log(L(i, i)) : L(i, j);
  return theta;
}

inline double condition_number(const MatrixXd& M) {
  if (M.size() == 0) return 1.0;
  Eigen::JacobiSVD<MatrixXd> svd(M);
  const VectorXd& s = svd.singularValues();
  return s[s.size() - 1] > 0.0 ? s[0] / s[s.size() - 1] : std::numeric_limits<double>::infinity();
}

}  // namespace cglmm::detail
