#pragma once

// Data generation for the two-marginal (Gaussian + Poisson) simulation
// design and the normality / bias studies built on it.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "conditional.hpp"
#include "dataset.hpp"
#include "laplace.hpp"
#include "model.hpp"
#include "quadrature.hpp"
#include "random.hpp"

namespace cglmm {

enum class StudyKind { normality, bias };

struct SimConfig {
  std::vector<double> beta{1.90, 0.21};  // intercepts of the Gaussian and Poisson marginals
  MatrixXd Sigma_base = (MatrixXd(2, 2) << 0.28, 0.09, 0.09, 0.12).finished();
  std::vector<double> const_grid{1.0, 50.0, 100.0};
  int q = 60;
  std::vector<int> q_grid{10, 50, 100};
  int cluster_size = 200;
  int replicates = 500;
  double gaussian_cond_var = 0.5;
  std::uint64_t seed = 1;
  std::optional<double> t_dof;  // multivariate t random components when set
  int quadrature_nodes = 20;
};

inline void to_json(nlohmann::json& j, const SimConfig& s) {
  std::vector<std::vector<double>> S(2, std::vector<double>(2));
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) S[a][b] = s.Sigma_base(a, b);
  j = nlohmann::json{{"beta", s.beta},         {"Sigma_base", S},
                     {"const_grid", s.const_grid}, {"q", s.q},
                     {"q_grid", s.q_grid},     {"cluster_size", s.cluster_size},
                     {"replicates", s.replicates}, {"gaussian_cond_var", s.gaussian_cond_var},
                     {"seed", s.seed},         {"quadrature_nodes", s.quadrature_nodes}};
  if (s.t_dof) j["t_dof"] = *s.t_dof;
}

inline void from_json(const nlohmann::json& j, SimConfig& s) {
  s = SimConfig{};
  if (j.contains("beta")) s.beta = j.at("beta").get<std::vector<double>>();
  if (j.contains("Sigma_base")) {
    const auto S = j.at("Sigma_base").get<std::vector<std::vector<double>>>();
    if (S.size() != 2 || S[0].size() != 2 || S[1].size() != 2) throw ConfigError("Sigma_base must be 2 x 2");
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) s.Sigma_base(a, b) = S[a][b];
  }
  if (j.contains("const_grid")) s.const_grid = j.at("const_grid").get<std::vector<double>>();
  s.q = j.value("q", s.q);
  if (j.contains("q_grid")) s.q_grid = j.at("q_grid").get<std::vector<int>>();
  s.cluster_size = j.value("cluster_size", s.cluster_size);
  s.replicates = j.value("replicates", s.replicates);
  s.gaussian_cond_var = j.value("gaussian_cond_var", s.gaussian_cond_var);
  s.seed = j.value("seed", s.seed);
  s.quadrature_nodes = j.value("quadrature_nodes", s.quadrature_nodes);
  if (j.contains("t_dof")) s.t_dof = j.at("t_dof").get<double>();
}

inline void validate_sim(const SimConfig& s) {
  if (s.beta.size() != 2) throw ConfigError("beta must have two entries");
  Eigen::LLT<MatrixXd> llt(s.Sigma_base);
  if (llt.info() != Eigen::Success || (s.Sigma_base - s.Sigma_base.transpose()).norm() > 0.0)
    throw ConfigError("Sigma_base must be symmetric positive definite");
  if (s.q < 1 || s.cluster_size < 1 || s.replicates < 1) throw ConfigError("counts must be positive");
  for (int q : s.q_grid)
    if (q < 1) throw ConfigError("q_grid entries must be positive");
  for (double c : s.const_grid)
    if (!(c > 0.0)) throw ConfigError("const_grid entries must be positive");
  if (!(s.gaussian_cond_var > 0.0)) throw ConfigError("gaussian_cond_var must be positive");
  if (s.t_dof && !(*s.t_dof > 4.0)) throw ConfigError("t_dof must exceed 4");
  if (s.quadrature_nodes < 20) throw ConfigError("quadrature_nodes must be at least 20");
}

/// Model of the simulation design: intercept-only Gaussian/identity (y1) and
/// Poisson/log (y2) marginals sharing one cluster component.
inline ModelSpec sim_model(const SimConfig& s) {
  ModelSpec m;
  m.marginals.push_back({"y1", FamilyId::normal, LinkId::identity, {}, std::nullopt, std::nullopt});
  m.marginals.push_back({"y2", FamilyId::poisson, LinkId::log, {}, std::nullopt, std::nullopt});
  m.clusters.push_back({"cluster", "cluster", std::nullopt});
  if (s.t_dof) m.random_dist = RandomDist{RandomDist::Kind::student_t, *s.t_dof};
  return m;
}

/// Draws the q x 2 random-component matrix B with rows of covariance
/// c Sigma_base. The same underlying draws are used for every c.
inline MatrixXd simulate_random_components(const SimConfig& s, double c, int q, std::uint64_t replicate) {
  Rng rng = make_rng(s.seed, replicate, 0);
  const MatrixXd L = Eigen::LLT<MatrixXd>(s.Sigma_base).matrixL();
  MatrixXd B(q, 2);
  for (int r = 0; r < q; ++r) B.row(r) = (std::sqrt(c) * sample_random_effect(rng, L, s.t_dof.value_or(0.0))).transpose();
  return B;
}

inline std::string cluster_label(int c) { return "c" + std::to_string(c + 1); }

inline Dataset simulate_dataset(const SimConfig& s, double c, int q, std::uint64_t replicate) {
  if (!(c > 0.0)) throw ConfigError("variance multiplier must be positive");
  const MatrixXd B = simulate_random_components(s, c, q, replicate);
  Rng r1 = make_rng(s.seed, replicate, 1);
  Rng r2 = make_rng(s.seed, replicate, 2);
  const int m = s.cluster_size;
  std::vector<std::string> cl;
  std::vector<double> y1, y2;
  cl.reserve(static_cast<std::size_t>(q) * m);
  for (int cidx = 0; cidx < q; ++cidx) {
    for (int i = 0; i < m; ++i) {
      cl.push_back(cluster_label(cidx));
      y1.push_back(sample_response(r1, FamilyId::normal, s.beta[0] + B(cidx, 0), s.gaussian_cond_var));
      y2.push_back(sample_response(r2, FamilyId::poisson, std::exp(s.beta[1] + B(cidx, 1)), 1.0));
    }
  }
  Dataset ds;
  ds.add_column("cluster", std::move(cl));
  ds.add_column("y1", y1);
  ds.add_column("y2", y2);
  return ds;
}

/// Replaces the responses of a design by draws from the model at the given
/// parameter state (beta, lambda, b per marginal).
inline ModelDesign simulate_responses(const ModelDesign& design, const FitResult& state, Rng& rng) {
  ModelDesign out = design;
  const std::vector<int> fitted = design.fitted_components();
  for (std::size_t j = 0; j < design.marginals.size(); ++j) {
    auto& m = out.marginals[j];
    std::vector<const ClusterComponent*> comps;
    std::vector<VectorXd> b;
    for (int r : fitted) {
      comps.push_back(&design.components[r]);
      b.push_back(chain_expand(design, r, state.marginals[j].b));
    }
    const MarginalProblem p(design.marginals[j], comps);
    const VectorXd mu = p.mu(p.eta(state.marginals[j].beta, b));
    for (Eigen::Index i = 0; i < m.n(); ++i) m.y[i] = sample_response(rng, m.family, mu[i], state.marginals[j].lambda, m.trials[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// studies

struct EstimateRow {
  double cell;  // const (normality) or q (bias)
  std::string method;
  int replicate;
  std::string parameter;
  double value;
};

struct BiasRow {
  std::string parameter;
  int q;
  std::string method;
  double bias, se;
  int n_ok;
};

struct NormalityRow {
  std::string parameter;
  double c;
  std::string method;
  double qq_correlation;
  int n_ok;
};

struct QqPoint {
  std::string parameter;
  double c;
  std::string method;
  double theoretical, sample;
};

struct FailureRow {
  double cell;
  std::string method;
  int failures, total;
  bool flagged;
};

struct StudyOutput {
  StudyKind kind = StudyKind::bias;
  std::vector<EstimateRow> estimates;
  std::vector<BiasRow> bias;
  std::vector<NormalityRow> normality;
  std::vector<QqPoint> qq_points;
  std::vector<FailureRow> failures;
};

/// Normal scores with Blom plotting positions.
inline std::vector<double> normal_scores(std::size_t n) {
  const boost::math::normal_distribution<double> nd;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = boost::math::quantile(nd, (static_cast<double>(i + 1) - 0.375) / (static_cast<double>(n) + 0.25));
  return out;
}

/// Correlation between the ordered sample and its normal scores.
inline double qq_correlation(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 3) return std::numeric_limits<double>::quiet_NaN();
  std::sort(x.begin(), x.end());
  const std::vector<double> z = normal_scores(n);
  const Eigen::Map<const VectorXd> a(x.data(), static_cast<Eigen::Index>(n)), b(z.data(), static_cast<Eigen::Index>(n));
  const VectorXd ac = a.array() - a.mean(), bc = b.array() - b.mean();
  const double den = ac.norm() * bc.norm();
  return den > 0.0 ? ac.dot(bc) / den : std::numeric_limits<double>::quiet_NaN();
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
/// written to per-index slots by fn.
inline void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline const std::vector<std::string>& study_methods_all() {
  static const std::vector<std::string> m{"condinf", "laplace", "quadrature"};
  return m;
}

namespace detail {

struct ReplicateEstimate {
  bool ok = false;
  std::vector<std::pair<std::string, double>> values;
};

inline ReplicateEstimate estimate_replicate(const ModelDesign& design, const std::string& method, bool with_sigma,
                                            int nodes, const FitOptions& opts) {
  ReplicateEstimate out;
  try {
    if (method == "quadrature") {
      for (std::size_t j = 0; j < design.marginals.size(); ++j) {
        const QuadratureResult qr = quadrature_mle(design, j, nodes, opts);
        if (!qr.converged || !qr.beta.allFinite()) return out;
        out.values.emplace_back("beta" + std::to_string(j + 1), qr.beta[0]);
      }
      out.ok = true;
      return out;
    }
    FitResult fr;
    if (method == "condinf") {
      FitOptions o = opts;
      o.estimate_covariance = with_sigma;
      fr = fit_conditional(design, o);
    } else if (method == "laplace") {
      LaplaceOptions lo;
      lo.fit = opts;
      fr = fit_laplace(design, lo);
    } else {
      throw ConfigError("unknown method '" + method + "'");
    }
    if (!fr.converged) return out;
    for (std::size_t j = 0; j < fr.marginals.size(); ++j)
      out.values.emplace_back("beta" + std::to_string(j + 1), fr.marginals[j].beta[0]);
    if (with_sigma && !fr.Sigma.empty()) {
      const MatrixXd& S = fr.Sigma[0];
      for (Eigen::Index a = 0; a < S.rows(); ++a)
        for (Eigen::Index b = a; b < S.cols(); ++b)
          out.values.emplace_back("Sigma" + std::to_string(a + 1) + std::to_string(b + 1), S(a, b));
    }
    out.ok = true;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    out.ok = false;
  }
  return out;
}

}  // namespace detail

/// Runs the normality study (cells: const_grid at q) or the bias study
/// (cells: q_grid at const 1). Output is independent of `threads`.
inline StudyOutput run_study(StudyKind kind, const SimConfig& sim, const std::vector<std::string>& methods,
                             int threads = 1, const FitOptions& opts = {}) {
  validate_sim(sim);
  for (const auto& m : methods)
    if (std::find(study_methods_all().begin(), study_methods_all().end(), m) == study_methods_all().end())
      throw ConfigError("unknown method '" + m + "'");
  StudyOutput out;
  out.kind = kind;
  const ModelSpec model = sim_model(sim);
  std::vector<double> cells;
  if (kind == StudyKind::normality) {
    cells = sim.const_grid;
  } else {
    for (int q : sim.q_grid) cells.push_back(q);
  }
  const bool with_sigma = kind == StudyKind::bias;
  for (double cell : cells) {
    const double c = kind == StudyKind::normality ? cell : 1.0;
    const int q = kind == StudyKind::normality ? sim.q : static_cast<int>(cell);
    // results[rep][method]
    std::vector<std::vector<detail::ReplicateEstimate>> results(static_cast<std::size_t>(sim.replicates));
    parallel_for(sim.replicates, threads, [&](int rep) {
      const Dataset ds = simulate_dataset(sim, c, q, static_cast<std::uint64_t>(rep));
      const ModelDesign design = build_design(model, ds);
      auto& slot = results[static_cast<std::size_t>(rep)];
      for (const auto& m : methods) slot.push_back(detail::estimate_replicate(design, m, with_sigma, sim.quadrature_nodes, opts));
    });
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const std::string& method = methods[mi];
      std::map<std::string, std::vector<double>> by_param;
      std::vector<std::string> order;
      int failures = 0;
      for (int rep = 0; rep < sim.replicates; ++rep) {
        const auto& est = results[static_cast<std::size_t>(rep)][mi];
        if (!est.ok) {
          ++failures;
          continue;
        }
        for (const auto& [name, value] : est.values) {
          if (!by_param.count(name)) order.push_back(name);
          by_param[name].push_back(value);
          out.estimates.push_back({cell, method, rep, name, value});
        }
      }
      out.failures.push_back({cell, method, failures, sim.replicates, failures > sim.replicates / 10});
      for (const auto& name : order) {
        const auto& v = by_param[name];
        const Eigen::Map<const VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
        if (kind == StudyKind::bias) {
          double truth = 0.0;
          if (name == "beta1") truth = sim.beta[0];
          if (name == "beta2") truth = sim.beta[1];
          if (name.rfind("Sigma", 0) == 0) truth = c * sim.Sigma_base(name[5] - '1', name[6] - '1');
          const double mean = x.mean();
          const double sd = v.size() > 1 ? std::sqrt((x.array() - mean).square().sum() / (x.size() - 1)) : 0.0;
          out.bias.push_back({name, q, method, mean - truth, sd / std::sqrt(static_cast<double>(v.size())),
                              static_cast<int>(v.size())});
        } else if (name.rfind("beta", 0) == 0) {
          out.normality.push_back({name, c, method, qq_correlation(v), static_cast<int>(v.size())});
          const double mean = x.mean();
          const double sd = v.size() > 1 ? std::sqrt((x.array() - mean).square().sum() / (x.size() - 1)) : 1.0;
          std::vector<double> zs(v.size());
          for (std::size_t i = 0; i < v.size(); ++i) zs[i] = sd > 0.0 ? (v[i] - mean) / sd : 0.0;
          std::sort(zs.begin(), zs.end());
          const std::vector<double> th = normal_scores(zs.size());
          for (std::size_t i = 0; i < zs.size(); ++i) out.qq_points.push_back({name, c, method, th[i], zs[i]});
        }
      }
    }
  }
  return out;
}

}  // namespace cglmm
