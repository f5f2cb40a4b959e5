#pragma once

// Sensitivity and variability matrices of the inference functions and the
// block inverse of the Godambe information.

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "detail/linalg.hpp"
#include "fit_result.hpp"
#include "inference.hpp"

namespace cglmm {

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GodambeMode { empirical, model_based };

struct GodambeOptions {
  GodambeMode mode = GodambeMode::empirical;
  bool beta_known = false;  // drop the beta block (k = 0)
  bool b_known = false;     // drop the b block (q = 0)
};

/// Blocks of S = [[S_beta_beta, S_beta_b], [S_b_beta, S_bb]] and V, where
/// S_beta_b = d psi_beta / d b (k x q) and S_b_beta = d psi_b / d beta (q x k),
/// together with the block inverse S^{-1} = [[A, E], [C, D]] and
/// J^{-1} = S^{-1} V S^{-T}.
struct GodambeBlocks {
  MatrixXd S_beta_beta, S_beta_b, S_b_beta, S_bb;
  MatrixXd V_beta_beta, V_beta_b, V_b_beta, V_bb;
  MatrixXd W, A, C, D, E;
  MatrixXd J_inv_beta;   // k x k
  MatrixXd J_inv_b;      // q x q
  MatrixXd J_inv_cross;  // q x k
  MatrixXd basis;        // maps b-block coordinates to random-component values
  double cond_S_beta_beta = 1.0;
  double cond_W = 1.0;

  Eigen::Index k() const { return S_beta_beta.rows(); }
  Eigen::Index q() const { return S_bb.rows(); }

  /// Covariance of the predicted random components in their own coordinates.
  MatrixXd b_covariance() const { return basis * J_inv_b * basis.transpose(); }

  MatrixXd full_inverse() const {
    MatrixXd J(k() + q(), k() + q());
    J.topLeftCorner(k(), k()) = J_inv_beta;
    J.bottomRightCorner(q(), q()) = J_inv_b;
    J.bottomLeftCorner(q(), k()) = J_inv_cross;
    J.topRightCorner(k(), q()) = J_inv_cross.transpose();
    return J;
  }
};

namespace detail {

inline MatrixXd checked_inverse(const MatrixXd& M, const char* what, double& cond) {
  cond = condition_number(M);
  if (!(cond < 1e14))
    throw SingularMatrixError(std::string(what) + " is singular (condition number " + std::to_string(cond) + ")");
  return M.partialPivLu().inverse();
}

}  // namespace detail

/// Assembles W, A, C, D, E and the blocks of J^{-1} from S and V given as
/// (k + q) square matrices ordered (beta, b).
inline GodambeBlocks assemble_godambe(const MatrixXd& S, const MatrixXd& V, Eigen::Index k) {
  const Eigen::Index q = S.rows() - k;
  GodambeBlocks g;
  g.S_beta_beta = S.topLeftCorner(k, k);
  g.S_beta_b = S.topRightCorner(k, q);
  g.S_b_beta = S.bottomLeftCorner(q, k);
  g.S_bb = S.bottomRightCorner(q, q);
  g.V_beta_beta = V.topLeftCorner(k, k);
  g.V_beta_b = V.topRightCorner(k, q);
  g.V_b_beta = V.bottomLeftCorner(q, k);
  g.V_bb = V.bottomRightCorner(q, q);

  const MatrixXd Sbb_inv = k > 0 ? detail::checked_inverse(g.S_beta_beta, "S_beta_beta", g.cond_S_beta_beta)
                                 : MatrixXd(0, 0);
  g.W = g.S_bb - g.S_b_beta * Sbb_inv * g.S_beta_b;
  g.D = q > 0 ? detail::checked_inverse(g.W, "W", g.cond_W) : MatrixXd(0, 0);
  g.A = Sbb_inv + Sbb_inv * g.S_beta_b * g.D * g.S_b_beta * Sbb_inv;
  g.E = -Sbb_inv * g.S_beta_b * g.D;
  g.C = -g.D * g.S_b_beta * Sbb_inv;

  g.J_inv_beta = g.A * g.V_beta_beta * g.A.transpose() + g.A * g.V_beta_b * g.E.transpose() +
                 g.E * g.V_b_beta * g.A.transpose() + g.E * g.V_bb * g.E.transpose();
  g.J_inv_b = g.C * g.V_beta_beta * g.C.transpose() + g.C * g.V_beta_b * g.D.transpose() +
              g.D * g.V_b_beta * g.C.transpose() + g.D * g.V_bb * g.D.transpose();
  g.J_inv_cross = g.C * g.V_beta_beta * g.A.transpose() + g.C * g.V_beta_b * g.E.transpose() +
                  g.D * g.V_b_beta * g.A.transpose() + g.D * g.V_bb * g.E.transpose();
  g.basis = MatrixXd::Identity(q, q);
  return g;
}

/// Sensitivity and variability of (psi_beta, psi_b) for one marginal at the
/// state (beta, b). The b block is expressed in mean-zero coordinates of each
/// component (identity coordinates when beta is known); clusters listed in
/// `fixed` are held at their values and excluded from the b block.
inline GodambeBlocks godambe_blocks(const MarginalProblem& p, const VectorXd& beta, const std::vector<VectorXd>& b,
                                    double lambda, const GodambeOptions& opts = {},
                                    const std::vector<std::vector<int>>& fixed = {}) {
  const LinearState s = p.state(beta, b);
  const Eigen::Index n = p.n();
  VectorXd hs(n), hv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (opts.mode == GodambeMode::empirical) {
      hs[i] = p.weight(i, s.mu[i], false);
      const double u = p.score(i, s.mu[i]);
      hv[i] = u * u;
    } else {
      const double w = p.weight(i, s.mu[i], true);
      hs[i] = w;
      hv[i] = 2.0 * lambda * w;
    }
  }
  const MatrixXd S_full = p.jacobian(hs);
  const MatrixXd V_full = p.jacobian(hv);
  const Eigen::Index k = p.k(), qt = p.q_total();

  // coordinates: beta (unless known) and a basis of the free b directions
  MatrixXd B;
  if (!opts.b_known) {
    std::vector<MatrixXd> blocks;
    Eigen::Index cols = 0;
    for (std::size_t r = 0; r < p.comps.size(); ++r) {
      const int q = p.comps[r]->q;
      std::vector<bool> is_fixed(q, false);
      if (r < fixed.size())
        for (int c : fixed[r]) is_fixed[c] = true;
      std::vector<int> free;
      for (int c = 0; c < q; ++c)
        if (!is_fixed[c]) free.push_back(c);
      const Eigen::Index nf = static_cast<Eigen::Index>(free.size());
      const MatrixXd local = opts.beta_known ? MatrixXd::Identity(nf, nf) : detail::zero_mean_basis(nf);
      MatrixXd blk = MatrixXd::Zero(q, local.cols());
      for (Eigen::Index j = 0; j < nf; ++j) blk.row(free[j]) = local.row(j);
      blocks.push_back(blk);
      cols += blk.cols();
    }
    B = MatrixXd::Zero(qt, cols);
    Eigen::Index ro = 0, co = 0;
    for (const auto& blk : blocks) {
      B.block(ro, co, blk.rows(), blk.cols()) = blk;
      ro += blk.rows();
      co += blk.cols();
    }
  } else {
    B.resize(qt, 0);
  }
  const Eigen::Index kk = opts.beta_known ? 0 : k;
  MatrixXd T = MatrixXd::Zero(k + qt, kk + B.cols());
  if (kk > 0) T.topLeftCorner(k, k).setIdentity();
  T.bottomRightCorner(qt, B.cols()) = B;
  const MatrixXd S = T.transpose() * S_full * T;
  const MatrixXd V = T.transpose() * V_full * T;
  GodambeBlocks g = assemble_godambe(S, V, kk);
  g.basis = B;
  return g;
}

}  // namespace cglmm
