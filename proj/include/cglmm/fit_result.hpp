#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cglmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct FitOptions {
  double outer_tol = 1e-8;   // max absolute change of (beta, b, lambda) per outer iteration
  int max_outer = 200;
  double inner_tol = 1e-10;  // max-norm of the inference functions
  int max_inner = 100;
  int step_halving_max = 30;
  bool polish = true;        // joint Newton refinement after the alternation
  bool estimate_covariance = true;
};

struct MarginalFit {
  VectorXd beta;
  double lambda = 1.0;
  std::vector<VectorXd> b;               // per random component, mean zero
  std::vector<std::vector<int>> degenerate;  // per fitted component, clamped clusters
  MatrixXd beta_cov;                     // sandwich covariance of beta (empty if unavailable)
  std::vector<double> trace;             // max parameter change per outer iteration
  int iterations = 0;
  bool converged = false;
};

struct FitResult {
  std::string method;
  std::vector<MarginalFit> marginals;
  std::vector<MatrixXd> Sigma;       // per random component, d x d
  std::vector<bool> sigma_boundary;  // per random component
  std::vector<std::string> notes;
  bool converged = false;
  int iterations = 0;

  bool has_degenerate_clusters() const {
    for (const auto& m : marginals)
      for (const auto& d : m.degenerate)
        if (!d.empty()) return true;
    return false;
  }
};

}  // namespace cglmm
