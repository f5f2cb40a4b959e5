#include <algorithm>
#include <chrono>
#include <random>

#include <gtest/gtest.h>

#include <cglmm/conditional.hpp>
#include <cglmm/random.hpp>

#include "oracles/oracles.hpp"

using namespace cglmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Sim {
  Dataset data;
  ModelSpec model;
};

// One-component data: x ~ N(0,1), b ~ N(0, s2), y | b from the family.
Sim simulate(FamilyId f, LinkId l, int q, int per, const VectorXd& beta, double s2, double lambda,
             std::uint64_t seed) {
  Rng rng = make_rng(seed, 0, 0);
  const int n = q * per;
  VectorXd x(n), y(n), b(q);
  for (int c = 0; c < q; ++c) b[c] = std::sqrt(s2) * standard_normal(rng);
  for (int i = 0; i < n; ++i) {
    x[i] = standard_normal(rng);
    const double eta = beta[0] + beta[1] * x[i] + b[i / per];
    y[i] = sample_response(rng, f, link_invert(l, eta), lambda);
  }
  return {oracle::make_dataset(oracle::cluster_labels(q, per), {{"x", x}, {"y", y}}),
          oracle::single_model(f, l, {"x"})};
}

MarginalProblem problem_of(const ModelDesign& d) {
  return MarginalProblem(d.marginals[0], {&d.components[0]});
}

}  // namespace

TEST(PredictB, GaussianClusterMeansMinusGrandMean) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  const int q = 5;
  std::vector<int> sizes = {2, 3, 4, 5, 6};
  std::vector<std::string> g;
  std::vector<double> yv;
  VectorXd means = VectorXd::Zero(q);
  for (int c = 0; c < q; ++c)
    for (int i = 0; i < sizes[c]; ++i) {
      g.push_back("k" + std::to_string(c));
      yv.push_back(z(rng) + c);
      means[c] += yv.back() / sizes[c];
    }
  Dataset ds;
  ds.add_column("g", g);
  ds.add_column("y", yv);
  ModelDesign d = build_design(oracle::single_model(FamilyId::normal, LinkId::identity, {}), ds);
  auto p = problem_of(d);
  PredictResult r = predict_b(p, VectorXd::Zero(1), {VectorXd::Zero(q)}, {});
  VectorXd expected = (means.array() - means.mean()).matrix();
  EXPECT_LT((r.b[0] - expected).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_LT((r.b_raw[0] - means).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(PredictB, PoissonLogClusterMeans) {
  const int q = 4, per = 5;
  std::vector<double> yv = {1, 2, 0, 3, 4, 0, 0, 1, 0, 0, 5, 7, 6, 9, 8, 2, 2, 2, 2, 3};
  Dataset ds = oracle::make_dataset(oracle::cluster_labels(q, per),
                                    {{"y", Eigen::Map<VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()))}});
  ModelDesign d = build_design(oracle::single_model(FamilyId::poisson, LinkId::log, {}), ds);
  PredictResult r = predict_b(problem_of(d), VectorXd::Zero(1), {VectorXd::Zero(q)}, {});
  VectorXd raw(q);
  for (int c = 0; c < q; ++c) {
    double s = 0.0;
    for (int i = 0; i < per; ++i) s += yv[c * per + i];
    raw[c] = std::log(s / per);
  }
  EXPECT_LT((r.b_raw[0] - raw).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_LT((r.b[0] - project_zero_mean(raw)).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(PredictB, IdenticalClustersGiveZero) {
  std::vector<double> block = {0, 3, 1, 2};
  std::vector<double> yv;
  for (int c = 0; c < 5; ++c) yv.insert(yv.end(), block.begin(), block.end());
  Dataset ds = oracle::make_dataset(oracle::cluster_labels(5, 4),
                                    {{"y", Eigen::Map<VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()))}});
  ModelDesign d = build_design(oracle::single_model(FamilyId::poisson, LinkId::log, {}), ds);
  PredictResult r = predict_b(problem_of(d), VectorXd::Constant(1, 0.3), {VectorXd::Zero(5)}, {});
  EXPECT_LT(r.b[0].lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(PredictB, LikelihoodNonDecreasingAcrossNewtonSteps) {
  Sim s = simulate(FamilyId::poisson, LinkId::log, 8, 10, Eigen::Vector2d(0.2, 0.5), 1.0, 1.0, 31);
  ModelDesign d = build_design(s.model, s.data);
  auto p = problem_of(d);
  const VectorXd beta = Eigen::Vector2d(-1.0, 0.9);
  double prev = -std::numeric_limits<double>::infinity();
  for (int steps = 1; steps <= 8; ++steps) {
    FitOptions o;
    o.max_inner = steps;
    PredictResult r = predict_b(p, beta, {VectorXd::Constant(8, 3.0)}, o);
    const double ll = p.log_likelihood(p.eta(beta, r.b_raw), 1.0);
    EXPECT_GE(ll, prev - 1e-9) << "after " << steps << " steps";
    prev = ll;
  }
}

TEST(PredictB, DegenerateClusterIsClampedAndFlagged) {
  std::vector<double> yv = {0, 0, 0, 1, 2, 0, 3, 1, 1};
  Dataset ds = oracle::make_dataset(oracle::cluster_labels(3, 3),
                                    {{"y", Eigen::Map<VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()))}});
  ModelDesign d = build_design(oracle::single_model(FamilyId::poisson, LinkId::log, {}), ds);
  PredictResult r = predict_b(problem_of(d), VectorXd::Zero(1), {VectorXd::Zero(3)}, {});
  ASSERT_EQ(r.degenerate[0], std::vector<int>{0});
  EXPECT_DOUBLE_EQ(r.b_raw[0][0], -kOffsetClamp);
  FitResult fit_res = fit_conditional(d);
  EXPECT_TRUE(fit_res.has_degenerate_clusters());
  EXPECT_NEAR(fit_res.marginals[0].b[0].mean(), 0.0, 1e-12);
}

TEST(UpdateBetaLambda, GaussianOlsAndRssOverN) {
  Sim s = simulate(FamilyId::normal, LinkId::identity, 6, 7, Eigen::Vector2d(1.0, -0.5), 0.4, 0.8, 5);
  ModelDesign d = build_design(s.model, s.data);
  auto p = problem_of(d);
  const MatrixXd& X = d.marginals[0].X;
  const VectorXd& y = d.marginals[0].y;
  BetaUpdate u = update_beta_lambda(p, {VectorXd::Zero(6)}, VectorXd::Zero(2), {});
  VectorXd ols = (X.transpose() * X).ldlt().solve(X.transpose() * y);
  EXPECT_LT((u.beta - ols).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_NEAR(u.lambda, (y - X * ols).squaredNorm() / y.size(), 1e-12);
}

TEST(UpdateBetaLambda, PoissonDispersionIsOne) {
  Sim s = simulate(FamilyId::poisson, LinkId::log, 6, 7, Eigen::Vector2d(0.5, 0.3), 0.4, 1.0, 6);
  ModelDesign d = build_design(s.model, s.data);
  BetaUpdate u = update_beta_lambda(problem_of(d), {VectorXd::Zero(6)}, VectorXd::Zero(2), {});
  EXPECT_EQ(u.lambda, 1.0);
  EXPECT_TRUE(u.converged);
}

TEST(UpdateBetaLambda, GammaDispersionSolvesScore) {
  Sim s = simulate(FamilyId::gamma, LinkId::log, 6, 20, Eigen::Vector2d(0.5, 0.3), 0.2, 0.3, 8);
  ModelDesign d = build_design(s.model, s.data);
  auto p = problem_of(d);
  BetaUpdate u = update_beta_lambda(p, {VectorXd::Zero(6)}, VectorXd::Zero(2), {});
  // the dispersion maximizes the conditional log-likelihood at fixed beta
  const VectorXd eta = p.eta(u.beta, {VectorXd::Zero(6)});
  const double h = 1e-4 * u.lambda;
  const double l0 = p.log_likelihood(eta, u.lambda);
  EXPECT_GE(l0, p.log_likelihood(eta, u.lambda + h));
  EXPECT_GE(l0, p.log_likelihood(eta, u.lambda - h));
  EXPECT_NEAR(u.lambda, 0.3, 0.1);
}

TEST(PredictNested, Examples) {
  auto [b1, b2] = predict_nested(Eigen::Vector4d(1, 3, 2, 4), {0, 0, 1, 1}, 2);
  EXPECT_EQ(b2, Eigen::Vector2d(2, 3));
  EXPECT_EQ(b1, Eigen::Vector4d(-1, 1, -1, 1));
  VectorXd v(5);
  v << 0.3, -1.2, 2.5, 0.7, 1.1;
  auto [c1, c2] = predict_nested(v, {0, 0, 0, 0, 0}, 1);
  EXPECT_DOUBLE_EQ(c2[0], v.mean());
  EXPECT_LT((c1 - project_zero_mean(v)).lpNorm<Eigen::Infinity>(), 1e-15);
  auto [d1, d2] = predict_nested(Eigen::Vector4d(0.25, 0.25, -1.5, -1.5), {0, 0, 1, 1}, 2);
  EXPECT_EQ(d1, Eigen::Vector4d::Zero());
  EXPECT_THROW(predict_nested(Eigen::Vector2d(1, 2), {0, 0}, 2), DataError);
}

TEST(Fit, GaussianMatchesConstrainedLeastSquares) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Sim s = simulate(FamilyId::normal, LinkId::identity, 10, 12, Eigen::Vector2d(2.0, 0.7), 0.5, 1.0, seed);
    ModelDesign d = build_design(s.model, s.data);
    FitResult r = fit(s.model, s.data);
    ASSERT_TRUE(r.converged);
    auto o = oracle::constrained_least_squares(d.marginals[0].y, d.marginals[0].X, allocation_matrix(d.components[0]));
    EXPECT_LT((r.marginals[0].beta - o.beta).lpNorm<Eigen::Infinity>(), 1e-8);
    EXPECT_LT((r.marginals[0].b[0] - o.b).lpNorm<Eigen::Infinity>(), 1e-8);
  }
}

TEST(Fit, InvariantsAtSolution) {
  struct Case {
    FamilyId f;
    LinkId l;
    double lambda;
  };
  for (Case cs : {Case{FamilyId::normal, LinkId::identity, 0.5}, Case{FamilyId::poisson, LinkId::log, 1.0},
                  Case{FamilyId::binomial, LinkId::logit, 1.0}, Case{FamilyId::gamma, LinkId::log, 0.2},
                  Case{FamilyId::inverse_gaussian, LinkId::log, 0.1}}) {
    Sim s = simulate(cs.f, cs.l, 12, 25, Eigen::Vector2d(0.4, 0.3), 0.3, cs.lambda, 17);
    FitOptions o;
    FitResult r = fit(s.model, s.data, o);
    ASSERT_TRUE(r.converged) << to_string(cs.f);
    ModelDesign d = build_design(s.model, s.data);
    const auto& mf = r.marginals[0];
    EXPECT_LE(std::abs(mf.b[0].mean()), 1e-12) << to_string(cs.f);
    auto psi = inference_functions(problem_of(d), mf.beta, mf.b);
    EXPECT_LE(psi.max_norm(), 10.0 * o.inner_tol) << to_string(cs.f);
    EXPECT_GT(mf.lambda, 0.0);
    ASSERT_EQ(r.Sigma.size(), 1u);
    EXPECT_GE(r.Sigma[0](0, 0), 0.0);
    EXPECT_EQ(mf.beta_cov.rows(), 2);
    EXPECT_GT(mf.beta_cov.ldlt().vectorD().minCoeff(), 0.0);
  }
}

TEST(Fit, ZeroVarianceMatchesGlm) {
  Sim s = simulate(FamilyId::poisson, LinkId::log, 20, 30, Eigen::Vector2d(0.5, 0.3), 0.0, 1.0, 23);
  ModelDesign d = build_design(s.model, s.data);
  FitResult r = fit_conditional(d);
  BetaUpdate glm = fit_glm(problem_of(d), {});
  const MatrixXd& cov = r.marginals[0].beta_cov;
  for (int a = 0; a < 2; ++a) EXPECT_LT(std::abs(r.marginals[0].beta[a] - glm.beta[a]), 3.0 * std::sqrt(cov(a, a)));
}

TEST(Fit, MedianErrorShrinksWithSampleSize) {
  const VectorXd beta = Eigen::Vector2d(0.3, 0.5);
  std::vector<double> medians;
  for (int per : {20, 80, 320}) {
    std::vector<double> err;
    for (std::uint64_t rep = 0; rep < 200; ++rep) {
      Sim s = simulate(FamilyId::poisson, LinkId::log, 10, per, beta, 0.2, 1.0, 1000 + rep);
      FitOptions o;
      o.estimate_covariance = false;
      FitResult r = fit_conditional(build_design(s.model, s.data), o);
      // the intercept absorbs the realized mean of b, so compare the slope
      err.push_back(std::abs(r.marginals[0].beta[1] - beta[1]));
    }
    std::nth_element(err.begin(), err.begin() + 100, err.end());
    medians.push_back(err[100]);
  }
  EXPECT_GT(medians[0], medians[1]);
  EXPECT_GT(medians[1], medians[2]);
}

TEST(Fit, NonConvergenceIsReported) {
  Sim s = simulate(FamilyId::poisson, LinkId::log, 10, 10, Eigen::Vector2d(0.5, 0.3), 1.0, 1.0, 2);
  FitOptions o;
  o.max_outer = 1;
  o.polish = false;
  FitResult r = fit(s.model, s.data, o);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.marginals[0].trace.size(), 1u);
}

TEST(Fit, ValidationFailureBlocksFitting) {
  Dataset ds = oracle::make_dataset({"a", "a", "b", "b"}, {{"y", Eigen::Vector4d(1, -1, 2, 0)}});
  EXPECT_THROW(fit(oracle::single_model(FamilyId::poisson, LinkId::log, {}), ds), DataError);
}

TEST(Fit, NestedComponentsSplitAndPreserveEta) {
  Rng rng = make_rng(41, 0, 0);
  std::vector<std::string> child, parent;
  std::vector<double> y;
  std::vector<double> bp = {0.5, -0.4, 0.1};
  for (int p = 0; p < 3; ++p)
    for (int c = 0; c < 4; ++c) {
      const double bc = 0.3 * standard_normal(rng);
      for (int i = 0; i < 6; ++i) {
        child.push_back("c" + std::to_string(p * 4 + c));
        parent.push_back("p" + std::to_string(p));
        y.push_back(1.0 + bp[p] + bc + 0.5 * standard_normal(rng));
      }
    }
  Dataset ds;
  ds.add_column("child", child);
  ds.add_column("parent", parent);
  ds.add_column("y", y);
  ModelSpec m = oracle::single_model(FamilyId::normal, LinkId::identity, {});
  m.clusters = {{"child", "child", "parent"}, {"parent", "parent", std::nullopt}};
  ModelDesign d = build_design(m, ds);
  FitResult r = fit_conditional(d);
  ASSERT_TRUE(r.converged);
  const auto& mf = r.marginals[0];
  ASSERT_EQ(mf.b.size(), 2u);
  EXPECT_NEAR(mf.b[0].mean(), 0.0, 1e-12);
  EXPECT_NEAR(mf.b[1].mean(), 0.0, 1e-12);
  // child effects average to zero within each parent
  for (int p = 0; p < 3; ++p) EXPECT_NEAR(mf.b[0].segment(4 * p, 4).mean(), 0.0, 1e-12);
  // the combined prediction equals the child-only constrained least squares
  auto o = oracle::constrained_least_squares(d.marginals[0].y, d.marginals[0].X, allocation_matrix(d.components[0]));
  VectorXd combined(12);
  for (int c = 0; c < 12; ++c) combined[c] = mf.beta[0] + mf.b[0][c] + mf.b[1][c / 4];
  EXPECT_LT((combined - (o.b.array() + o.beta[0]).matrix()).lpNorm<Eigen::Infinity>(), 1e-8);
  ASSERT_EQ(r.Sigma.size(), 2u);
}

TEST(Fit, NonNestedComponentsSatisfyConstraints) {
  Rng rng = make_rng(43, 0, 0);
  std::vector<std::string> a, b;
  std::vector<double> y;
  VectorXd ea(5), eb(4);
  for (auto* v : {&ea, &eb})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = 0.5 * standard_normal(rng);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j)
      for (int r = 0; r < 3; ++r) {
        a.push_back("a" + std::to_string(i));
        b.push_back("b" + std::to_string(j));
        y.push_back(sample_response(rng, FamilyId::poisson, std::exp(0.5 + ea[i] + eb[j]), 1.0));
      }
  Dataset ds;
  ds.add_column("A", a);
  ds.add_column("B", b);
  ds.add_column("y", y);
  ModelSpec m = oracle::single_model(FamilyId::poisson, LinkId::log, {});
  m.clusters = {{"A", "A", std::nullopt}, {"B", "B", std::nullopt}};
  ModelDesign d = build_design(m, ds);
  FitOptions o;
  FitResult r = fit_conditional(d, o);
  ASSERT_TRUE(r.converged);
  const auto& mf = r.marginals[0];
  EXPECT_NEAR(mf.b[0].mean(), 0.0, 1e-12);
  EXPECT_NEAR(mf.b[1].mean(), 0.0, 1e-12);
  MarginalProblem p(d.marginals[0], {&d.components[0], &d.components[1]});
  EXPECT_LE(inference_functions(p, mf.beta, mf.b).max_norm(), 10.0 * o.inner_tol);
}

TEST(Fit, GaussianRuntimeUnderOneSecond) {
  Sim s = simulate(FamilyId::normal, LinkId::identity, 20, 25, Eigen::Vector2d(1.0, 0.5), 0.5, 1.0, 99);
  const auto t0 = std::chrono::steady_clock::now();
  FitResult r = fit(s.model, s.data);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_TRUE(r.converged);
  EXPECT_LT(secs, 1.0);
}
