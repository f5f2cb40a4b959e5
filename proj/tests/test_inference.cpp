#include <random>

#include <gtest/gtest.h>

#include <cglmm/inference.hpp>
#include <cglmm/random.hpp>

#include "oracles/oracles.hpp"
#include "oracles/shift.hpp"

using namespace cglmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd allocation(const std::vector<int>& idx, int q) {
  MatrixXd Z = MatrixXd::Zero(static_cast<Eigen::Index>(idx.size()), q);
  for (std::size_t i = 0; i < idx.size(); ++i) Z(static_cast<Eigen::Index>(i), idx[i]) = 1.0;
  return Z;
}

struct Problem {
  MarginalDesign m;
  ClusterComponent c;
};

Problem random_problem(FamilyId f, LinkId l, int q, int per, int k, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Problem p;
  const int n = q * per;
  p.m.family = f;
  p.m.link = l;
  p.m.X.resize(n, k);
  p.m.X.col(0).setOnes();
  for (int i = 0; i < n; ++i)
    for (int j = 1; j < k; ++j) p.m.X(i, j) = 0.5 * z(rng);
  p.m.y = VectorXd::Zero(n);
  p.m.trials = VectorXd::Ones(n);
  p.c.q = q;
  for (int i = 0; i < n; ++i) p.c.index.push_back(i / per);
  return p;
}

}  // namespace

TEST(LinearPredictor, KnownValues) {
  MatrixXd X = MatrixXd::Ones(3, 1);
  MatrixXd Z = allocation({0, 0, 1}, 2);
  LinearState s = linear_predictor(VectorXd::Constant(1, 1.0), VectorXd::Zero(2), X, Z, LinkId::identity);
  EXPECT_EQ(s.eta, VectorXd::Ones(3));
  EXPECT_EQ(s.mu, VectorXd::Ones(3));
  MatrixXd X2 = MatrixXd::Ones(2, 1);
  LinearState t = linear_predictor(VectorXd::Zero(1), Eigen::Vector2d(1, -1), X2, allocation({0, 1}, 2), LinkId::log);
  EXPECT_DOUBLE_EQ(t.mu[0], std::exp(1.0));
  EXPECT_DOUBLE_EQ(t.mu[1], std::exp(-1.0));
}

TEST(LinearPredictor, MatchesDenseProduct) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  auto p = random_problem(FamilyId::normal, LinkId::identity, 6, 5, 3, rng);
  VectorXd beta(3), b(6);
  for (auto* v : {&beta, &b})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = z(rng);
  MatrixXd Z = allocation(p.c.index, 6);
  LinearState s = linear_predictor(beta, b, p.m.X, Z, LinkId::identity);
  EXPECT_LT((s.eta - (p.m.X * beta + Z * b)).lpNorm<Eigen::Infinity>(), 1e-14);
  EXPECT_THROW(linear_predictor(beta, b, p.m.X, 2.0 * Z, LinkId::identity), DataError);
}

TEST(LinearPredictor, ShiftIdentityIsBitExactOnRepresentableGrid) {
  std::mt19937_64 rng(21);
  for (double delta : {0.1, 1.0, 10.0, -0.37, 3.5}) {
    ASSERT_TRUE(oracle::on_shift_grid(delta));
    for (int rep = 0; rep < 20; ++rep) {
      auto p = random_problem(FamilyId::poisson, LinkId::log, 7, 4, 3, rng);
      VectorXd beta(3), b(7);
      beta[0] = oracle::shift_grid_draw(delta, rng);
      beta[1] = 0.3;
      beta[2] = -0.2;
      for (int c = 0; c < 7; ++c) b[c] = oracle::shift_grid_draw(delta, rng);
      VectorXd beta_s = beta;
      beta_s[0] += delta;
      VectorXd b_s = (b.array() - delta).matrix();
      MarginalProblem mp(p.m, {&p.c});
      VectorXd e0 = mp.eta(beta, {b}), e1 = mp.eta(beta_s, {b_s});
      EXPECT_TRUE((e0.array() == e1.array()).all()) << "delta " << delta;
    }
  }
}

TEST(LinearPredictor, ShiftIdentityHoldsToRoundingForArbitraryValues) {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> z;
  auto p = random_problem(FamilyId::normal, LinkId::identity, 8, 3, 2, rng);
  MarginalProblem mp(p.m, {&p.c});
  for (double delta : {0.1, 1.0, 10.0}) {
    VectorXd beta(2), b(8);
    for (auto* v : {&beta, &b})
      for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = z(rng);
    VectorXd beta_s = beta;
    beta_s[0] += delta;
    VectorXd e0 = mp.eta(beta, {b}), e1 = mp.eta(beta_s, {(b.array() - delta).matrix()});
    EXPECT_LT((e0 - e1).lpNorm<Eigen::Infinity>(), 1e-13 * (1.0 + std::abs(delta)));
  }
}

TEST(ProjectZeroMean, Examples) {
  EXPECT_EQ(project_zero_mean(Eigen::Vector3d(1, 2, 3)), Eigen::Vector3d(-1, 0, 1));
  EXPECT_EQ(project_zero_mean(Eigen::Vector3d(0, 0, 0)), Eigen::Vector3d(0, 0, 0));
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 50; ++rep) {
    VectorXd v(9);
    for (int i = 0; i < 9; ++i) v[i] = 5.0 * z(rng);
    VectorXd p1 = project_zero_mean(v);
    EXPECT_NEAR(p1.mean(), 0.0, 1e-14);
    EXPECT_LT((project_zero_mean(p1) - p1).lpNorm<Eigen::Infinity>(), 1e-14);
  }
}

TEST(InferenceFunctions, NormalIdentityMatchesSymbolicGradient) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z;
  auto p = random_problem(FamilyId::normal, LinkId::identity, 5, 6, 3, rng);
  MatrixXd Z = allocation(p.c.index, 5);
  VectorXd beta(3), b(5), y(30);
  for (auto* v : {&beta, &b, &y})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = z(rng);
  auto psi = inference_functions(beta, b, y, p.m.X, Z, FamilyId::normal, LinkId::identity);
  const VectorXd r = y - p.m.X * beta - Z * b;
  EXPECT_LT((psi.psi_beta - (-2.0 * p.m.X.transpose() * r)).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT((psi.psi_b[0] - (-2.0 * Z.transpose() * r)).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(InferenceFunctions, StationaryAtGaussianOneWayMle) {
  // one-way layout, intercept only: conditional MLE b_c = mean_c - grand mean of means
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  const int q = 6, per = 4;
  auto p = random_problem(FamilyId::normal, LinkId::identity, q, per, 1, rng);
  VectorXd y(q * per);
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = z(rng) + 0.3 * p.c.index[i];
  VectorXd means = VectorXd::Zero(q);
  for (Eigen::Index i = 0; i < y.size(); ++i) means[p.c.index[i]] += y[i] / per;
  VectorXd beta = VectorXd::Constant(1, means.mean());
  VectorXd b = project_zero_mean(means);
  auto psi = inference_functions(beta, b, y, p.m.X, allocation(p.c.index, q), FamilyId::normal, LinkId::identity);
  EXPECT_LT(psi.max_norm(), 1e-10);
}

TEST(InferenceFunctions, ScoreDerivativeMatchesDevianceDifferences) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.2, 5.0);
  std::uniform_int_distribution<int> cnt(0, 8);
  for (int rep = 0; rep < 200; ++rep) {
    const double mu = u(rng);
    const double y = cnt(rng);
    const double h = 1e-6 * mu;
    const double fd = (unit_deviance(FamilyId::poisson, y, mu + h) - unit_deviance(FamilyId::poisson, y, mu - h)) / (2 * h);
    EXPECT_NEAR(deviance_dmu(FamilyId::poisson, y, mu) / fd, 1.0, 1e-6);
  }
}

TEST(InferenceFunctions, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z;
  struct Case {
    FamilyId f;
    LinkId l;
  };
  for (Case cs : {Case{FamilyId::normal, LinkId::identity}, Case{FamilyId::poisson, LinkId::log},
                  Case{FamilyId::binomial, LinkId::logit}, Case{FamilyId::gamma, LinkId::log},
                  Case{FamilyId::inverse_gaussian, LinkId::inverse}, Case{FamilyId::poisson, LinkId::sqrt}}) {
    auto p = random_problem(cs.f, cs.l, 4, 5, 2, rng);
    VectorXd beta(2), b(4);
    beta << (cs.l == LinkId::inverse ? 1.0 : (cs.l == LinkId::sqrt ? 2.0 : 0.2)), 0.1;
    for (int c = 0; c < 4; ++c) b[c] = 0.1 * z(rng);
    Rng r = make_rng(3, 0, 0);
    MarginalProblem mp(p.m, {&p.c});
    LinearState s = mp.state(beta, {b});
    for (Eigen::Index i = 0; i < p.m.n(); ++i) p.m.y[i] = sample_response(r, cs.f, s.mu[i], 0.5);
    auto psi = [&](const VectorXd& th) {
      auto f = inference_functions(mp, th.head(2), {th.tail(4)});
      VectorXd out(6);
      out << f.psi_beta, f.psi_b[0];
      return out;
    };
    VectorXd th(6);
    th << beta, b;
    MatrixXd fd = oracle::fd_jacobian(psi, th);
    MatrixXd an = mp.jacobian(mp.weights(s.mu, false));
    EXPECT_LT((fd - an).lpNorm<Eigen::Infinity>() / an.lpNorm<Eigen::Infinity>(), 1e-6)
        << to_string(cs.f) << "/" << to_string(cs.l);
  }
}

TEST(InferenceFunctions, UnbiasedAtTruth) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z;
  for (auto [f, l] : {std::pair{FamilyId::normal, LinkId::identity}, std::pair{FamilyId::poisson, LinkId::log}}) {
    auto p = random_problem(f, l, 5, 8, 2, rng);
    MarginalProblem mp(p.m, {&p.c});
    VectorXd beta(2), b(5);
    beta << 0.8, 0.4;
    for (int c = 0; c < 5; ++c) b[c] = 0.4 * z(rng);
    const VectorXd mu = mp.state(beta, {b}).mu;
    const int draws = 1000;
    VectorXd sum = VectorXd::Zero(7), sumsq = VectorXd::Zero(7);
    for (int d = 0; d < draws; ++d) {
      Rng r = make_rng(77, static_cast<std::uint64_t>(d), 1);
      for (Eigen::Index i = 0; i < p.m.n(); ++i) p.m.y[i] = sample_response(r, f, mu[i], 0.7);
      auto psi = inference_functions(mp, beta, {b});
      VectorXd v(7);
      v << psi.psi_beta, psi.psi_b[0];
      sum += v;
      sumsq += v.cwiseProduct(v);
    }
    VectorXd mean = sum / draws;
    VectorXd se = ((sumsq / draws - mean.cwiseProduct(mean)) / (draws - 1.0)).cwiseSqrt();
    for (int a = 0; a < 7; ++a) EXPECT_LT(std::abs(mean[a]), 4.0 * se[a]) << to_string(f) << " coord " << a;
  }
}
