#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include <cglmm/simulation.hpp>

using namespace cglmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

SimConfig small_config() {
  SimConfig s;
  s.q = 8;
  s.q_grid = {6, 9};
  s.cluster_size = 12;
  s.replicates = 5;
  s.seed = 99;
  return s;
}

int count_rows(const StudyOutput& out, const std::string& method, const std::string& prefix) {
  int n = 0;
  for (const auto& r : out.estimates)
    if (r.method == method && r.parameter.rfind(prefix, 0) == 0) ++n;
  return n;
}

}  // namespace

TEST(SimulateDataset, DeterministicPerReplicate) {
  const SimConfig s = small_config();
  const Dataset a = simulate_dataset(s, 1.0, 10, 3);
  const Dataset b = simulate_dataset(s, 1.0, 10, 3);
  const Dataset c = simulate_dataset(s, 1.0, 10, 4);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(a.n_rows(), 10u * s.cluster_size);
  EXPECT_EQ(a.names(), (std::vector<std::string>{"cluster", "y1", "y2"}));
}

TEST(SimulateDataset, RandomComponentCovariance) {
  SimConfig s;
  const double c = 2.0;
  const int q = 100000;
  const MatrixXd B = simulate_random_components(s, c, q, 0);
  const MatrixXd centred = B.rowwise() - B.colwise().mean();
  const MatrixXd S = centred.transpose() * centred / (q - 1);
  const MatrixXd target = c * s.Sigma_base;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double se = std::sqrt((target(a, a) * target(b, b) + target(a, b) * target(a, b)) / q);
      EXPECT_LT(std::abs(S(a, b) - target(a, b)), 3 * se) << a << "," << b;
    }
}

TEST(SimulateDataset, CommonRandomNumbersAcrossMultipliers) {
  SimConfig s;
  const MatrixXd B1 = simulate_random_components(s, 1.0, 20, 2);
  const MatrixXd B4 = simulate_random_components(s, 4.0, 20, 2);
  EXPECT_LT((B4 - 2.0 * B1).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SimulateDataset, VanishingRandomComponents) {
  SimConfig s;
  s.cluster_size = 400;
  const int q = 50;
  const Dataset ds = simulate_dataset(s, 1e-12, q, 0);
  const auto y1 = ds.numeric("y1"), y2 = ds.numeric("y2");
  const Eigen::Map<const VectorXd> v1(y1.data(), y1.size()), v2(y2.data(), y2.size());
  const double n = static_cast<double>(v1.size());
  const double m1 = v1.mean(), m2 = v2.mean();
  const double var1 = (v1.array() - m1).square().sum() / (n - 1);
  const double var2 = (v2.array() - m2).square().sum() / (n - 1);
  const double mu2 = std::exp(s.beta[1]);
  EXPECT_LT(std::abs(m1 - s.beta[0]), 4 * std::sqrt(s.gaussian_cond_var / n));
  EXPECT_LT(std::abs(var1 - s.gaussian_cond_var), 4 * s.gaussian_cond_var * std::sqrt(2 / n));
  EXPECT_LT(std::abs(m2 - mu2), 4 * std::sqrt(mu2 / n));
  // Poisson variance estimate: Var(s^2) ~ (mu + 2 mu^2) / n
  EXPECT_LT(std::abs(var2 - mu2), 4 * std::sqrt((mu2 + 2 * mu2 * mu2) / n));
}

TEST(SimulateDataset, RejectsNonPositiveMultiplier) {
  EXPECT_THROW(simulate_dataset(small_config(), 0.0, 5, 0), ConfigError);
  SimConfig s = small_config();
  s.Sigma_base(0, 1) = 1.0;
  EXPECT_THROW(run_study(StudyKind::bias, s, {"condinf"}), ConfigError);
}

TEST(QqCorrelation, Basics) {
  EXPECT_NEAR(qq_correlation(normal_scores(50)), 1.0, 1e-12);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::exponential_distribution<double> ed;
  std::vector<double> g(400), e(400);
  for (int i = 0; i < 400; ++i) {
    g[i] = nd(rng);
    e[i] = ed(rng);
  }
  EXPECT_GT(qq_correlation(g), 0.99);
  EXPECT_LT(qq_correlation(e), qq_correlation(g));
  const double r = qq_correlation(g);
  for (double& v : g) v = 3.0 * v - 7.0;
  EXPECT_NEAR(qq_correlation(g), r, 1e-12);
}

TEST(RunStudy, BiasTablesShape) {
  const SimConfig s = small_config();
  const std::vector<std::string> methods{"condinf", "laplace", "quadrature"};
  const StudyOutput out = run_study(StudyKind::bias, s, methods);
  ASSERT_EQ(out.failures.size(), s.q_grid.size() * methods.size());
  int expected = 0;
  for (const auto& f : out.failures) {
    EXPECT_EQ(f.total, s.replicates);
    const int params = f.method == "quadrature" ? 2 : 5;
    expected += (f.total - f.failures) * params;
  }
  EXPECT_EQ(static_cast<int>(out.estimates.size()), expected);
  EXPECT_GT(count_rows(out, "condinf", "Sigma"), 0);
  EXPECT_GT(count_rows(out, "laplace", "Sigma"), 0);
  EXPECT_EQ(count_rows(out, "quadrature", "Sigma"), 0);
  EXPECT_GT(count_rows(out, "quadrature", "beta"), 0);
  std::set<int> qs;
  for (const auto& b : out.bias) qs.insert(b.q);
  EXPECT_EQ(qs, (std::set<int>{6, 9}));
  EXPECT_TRUE(out.normality.empty());
  for (const auto& b : out.bias) {
    EXPECT_TRUE(std::isfinite(b.bias));
    EXPECT_GE(b.se, 0.0);
  }
}

TEST(RunStudy, QuadratureOnlyHasNoCovarianceRows) {
  const StudyOutput out = run_study(StudyKind::bias, small_config(), {"quadrature"});
  for (const auto& r : out.estimates) EXPECT_EQ(r.parameter.rfind("Sigma", 0), std::string::npos);
  for (const auto& b : out.bias) EXPECT_EQ(b.parameter.rfind("Sigma", 0), std::string::npos);
}

TEST(RunStudy, NormalityTablesShape) {
  const SimConfig s = small_config();
  const StudyOutput out = run_study(StudyKind::normality, s, {"condinf"});
  ASSERT_EQ(out.normality.size(), 2u * s.const_grid.size());
  std::set<std::pair<std::string, double>> keys;
  for (const auto& r : out.normality) {
    keys.insert({r.parameter, r.c});
    EXPECT_LE(r.qq_correlation, 1.0 + 1e-12);
  }
  EXPECT_EQ(keys.size(), 6u);
  std::size_t n_ok = 0;
  for (const auto& r : out.normality) n_ok += r.n_ok;
  EXPECT_EQ(out.qq_points.size(), n_ok);
  EXPECT_TRUE(out.bias.empty());
}

TEST(RunStudy, ReproducibleAcrossRunsAndThreads) {
  const SimConfig s = small_config();
  const StudyOutput a = run_study(StudyKind::bias, s, {"condinf", "laplace"}, 1);
  const StudyOutput b = run_study(StudyKind::bias, s, {"condinf", "laplace"}, 1);
  const StudyOutput c = run_study(StudyKind::bias, s, {"condinf", "laplace"}, 3);
  ASSERT_EQ(a.estimates.size(), b.estimates.size());
  ASSERT_EQ(a.estimates.size(), c.estimates.size());
  for (std::size_t i = 0; i < a.estimates.size(); ++i) {
    EXPECT_EQ(a.estimates[i].parameter, c.estimates[i].parameter);
    EXPECT_EQ(a.estimates[i].replicate, c.estimates[i].replicate);
    EXPECT_EQ(a.estimates[i].value, b.estimates[i].value);
    EXPECT_EQ(a.estimates[i].value, c.estimates[i].value);
  }
  for (std::size_t i = 0; i < a.bias.size(); ++i) EXPECT_EQ(a.bias[i].bias, c.bias[i].bias);
}

TEST(RunStudy, UnknownMethodRejected) {
  EXPECT_THROW(run_study(StudyKind::bias, small_config(), {"bootstrap"}), ConfigError);
}
