#pragma once

// Model specification, configuration parsing, design construction and
// validation of the checkable regularity conditions.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dataset.hpp"
#include "family.hpp"

namespace cglmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MarginalSpec {
  std::string response;
  FamilyId family = FamilyId::normal;
  LinkId link = LinkId::identity;
  std::vector<std::string> covariates;  // intercept is always prepended
  std::optional<std::string> trials;    // binomial only
  std::optional<double> dispersion;     // fixes lambda instead of estimating it

  bool operator==(const MarginalSpec&) const = default;
};

struct ClusterSpec {
  std::string name;
  std::string column;
  std::optional<std::string> nested_in;

  bool operator==(const ClusterSpec&) const = default;
};

struct RandomDist {
  enum class Kind { gaussian, student_t };
  Kind kind = Kind::gaussian;
  double dof = 0.0;

  bool operator==(const RandomDist&) const = default;
};

struct ModelSpec {
  std::vector<MarginalSpec> marginals;
  std::vector<ClusterSpec> clusters;
  RandomDist random_dist;

  bool operator==(const ModelSpec&) const = default;
};

// ---------------------------------------------------------------------------
// JSON configuration

inline void to_json(nlohmann::json& j, const MarginalSpec& m) {
  j = nlohmann::json{{"response", m.response},
                     {"family", std::string(to_string(m.family))},
                     {"link", std::string(to_string(m.link))},
                     {"covariates", m.covariates}};
  if (m.trials) j["trials"] = *m.trials;
  if (m.dispersion) j["dispersion"] = *m.dispersion;
}

inline void from_json(const nlohmann::json& j, MarginalSpec& m) {
  m.response = j.at("response").get<std::string>();
  m.family = parse_family(j.at("family").get<std::string>());
  m.link = parse_link(j.at("link").get<std::string>());
  m.covariates = j.value("covariates", std::vector<std::string>{});
  m.trials.reset();
  m.dispersion.reset();
  if (j.contains("trials")) m.trials = j.at("trials").get<std::string>();
  if (j.contains("dispersion")) m.dispersion = j.at("dispersion").get<double>();
  const bool fixed = family_spec(m.family).dispersion_fixed;
  if (j.value("estimate_dispersion", false) && fixed)
    throw ConfigError("dispersion of the " + std::string(to_string(m.family)) +
                      " family is fixed at 1 and cannot be estimated");
  if (fixed && m.dispersion && *m.dispersion != 1.0)
    throw ConfigError("dispersion of the " + std::string(to_string(m.family)) +
                      " family must be 1");
}

inline void to_json(nlohmann::json& j, const ClusterSpec& c) {
  j = nlohmann::json{{"name", c.name}, {"column", c.column}};
  if (c.nested_in) j["nested_in"] = *c.nested_in;
}

inline void from_json(const nlohmann::json& j, ClusterSpec& c) {
  c.column = j.at("column").get<std::string>();
  c.name = j.value("name", c.column);
  c.nested_in.reset();
  if (j.contains("nested_in") && !j.at("nested_in").is_null())
    c.nested_in = j.at("nested_in").get<std::string>();
}

inline void to_json(nlohmann::json& j, const RandomDist& r) {
  if (r.kind == RandomDist::Kind::gaussian) {
    j = nlohmann::json{{"type", "gaussian"}};
  } else {
    j = nlohmann::json{{"type", "student_t"}, {"dof", r.dof}};
  }
}

inline void from_json(const nlohmann::json& j, RandomDist& r) {
  const auto type = j.value("type", std::string("gaussian"));
  if (type == "gaussian") {
    r = RandomDist{};
  } else if (type == "student_t") {
    r.kind = RandomDist::Kind::student_t;
    r.dof = j.at("dof").get<double>();
    if (!(r.dof > 4.0)) throw ConfigError("student_t random components need dof > 4");
  } else {
    throw ConfigError("unknown random_dist type '" + type + "'");
  }
}

inline void to_json(nlohmann::json& j, const ModelSpec& m) {
  j = nlohmann::json{{"marginals", m.marginals}, {"clusters", m.clusters}, {"random_dist", m.random_dist}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& m) {
  m.marginals = j.at("marginals").get<std::vector<MarginalSpec>>();
  m.clusters = j.at("clusters").get<std::vector<ClusterSpec>>();
  m.random_dist = j.contains("random_dist") ? j.at("random_dist").get<RandomDist>() : RandomDist{};
  if (m.marginals.empty()) throw ConfigError("model needs at least one marginal");
  if (m.clusters.empty()) throw ConfigError("model needs at least one cluster component");
}

inline ModelSpec parse_model(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model configuration: ") + e.what());
  }
}

inline ModelSpec read_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model configuration '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

// ---------------------------------------------------------------------------
// designs

/// Numeric design of one marginal model.
struct MarginalDesign {
  FamilyId family = FamilyId::normal;
  LinkId link = LinkId::identity;
  std::string response;
  MatrixXd X;       // n x k, intercept first
  VectorXd y;       // binomial: observed proportion
  VectorXd trials;  // binomial trial counts, ones otherwise
  std::vector<std::string> coef_names;
  std::optional<double> fixed_dispersion;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index k() const { return X.cols(); }
  bool dispersion_fixed() const { return family_spec(family).dispersion_fixed || fixed_dispersion.has_value(); }
};

/// Allocation of observations to the clusters of one random component.
struct ClusterComponent {
  std::string name;
  std::vector<int> index;  // observation -> cluster
  int q = 0;
  std::vector<std::string> labels;
  int parent = -1;                // index of the component this one is nested in
  std::vector<int> parent_of;     // cluster -> parent cluster (nested only)
};

struct ModelDesign {
  std::vector<MarginalDesign> marginals;
  std::vector<ClusterComponent> components;
  RandomDist random_dist;
  Eigen::Index n = 0;

  /// Components not acting as the parent of another component; these are
  /// fitted jointly, parents are predicted from them afterwards.
  std::vector<int> fitted_components() const {
    std::vector<bool> is_parent(components.size(), false);
    for (const auto& c : components)
      if (c.parent >= 0) is_parent[c.parent] = true;
    std::vector<int> out;
    for (std::size_t r = 0; r < components.size(); ++r)
      if (!is_parent[r]) out.push_back(static_cast<int>(r));
    return out;
  }
};

namespace detail {

inline ClusterComponent make_component(const std::string& name, const std::vector<std::string>& cells) {
  ClusterComponent c;
  c.name = name;
  std::map<std::string, int> seen;
  c.index.resize(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto [it, inserted] = seen.try_emplace(cells[i], static_cast<int>(c.labels.size()));
    if (inserted) c.labels.push_back(cells[i]);
    c.index[i] = it->second;
  }
  c.q = static_cast<int>(c.labels.size());
  return c;
}

inline int component_position(const ModelSpec& model, const std::string& name) {
  for (std::size_t r = 0; r < model.clusters.size(); ++r)
    if (model.clusters[r].name == name) return static_cast<int>(r);
  return -1;
}

/// Child cluster -> parent cluster map; empty result with `consistent=false`
/// when some child cluster meets two parents.
inline std::vector<int> nesting_map(const ClusterComponent& child, const ClusterComponent& parent,
                                    std::vector<int>* conflicting = nullptr) {
  std::vector<int> map(child.q, -1);
  std::set<int> bad;
  for (std::size_t i = 0; i < child.index.size(); ++i) {
    int& m = map[child.index[i]];
    if (m < 0) {
      m = parent.index[i];
    } else if (m != parent.index[i]) {
      bad.insert(child.index[i]);
    }
  }
  if (conflicting) conflicting->assign(bad.begin(), bad.end());
  return map;
}

}  // namespace detail

/// Builds the numeric design. Throws DataError/ConfigError on missing or
/// non-numeric columns and inconsistent nesting.
inline ModelDesign build_design(const ModelSpec& model, const Dataset& data) {
  ModelDesign design;
  design.n = static_cast<Eigen::Index>(data.n_rows());
  design.random_dist = model.random_dist;
  if (model.random_dist.kind == RandomDist::Kind::student_t && !(model.random_dist.dof > 4.0))
    throw ConfigError("student_t random components need dof > 4");
  for (const auto& ms : model.marginals) {
    MarginalDesign md;
    md.family = ms.family;
    md.link = ms.link;
    md.response = ms.response;
    md.fixed_dispersion = ms.dispersion;
    if (family_spec(ms.family).dispersion_fixed) md.fixed_dispersion.reset();
    if (!link_compatible(ms.family, ms.link))
      throw ConfigError("link '" + std::string(to_string(ms.link)) + "' is incompatible with family '" +
                        std::string(to_string(ms.family)) + "'");
    const auto n = design.n;
    md.X.resize(n, 1 + static_cast<Eigen::Index>(ms.covariates.size()));
    md.X.col(0).setOnes();
    md.coef_names.push_back("(Intercept)");
    for (std::size_t c = 0; c < ms.covariates.size(); ++c) {
      const auto v = data.numeric(ms.covariates[c]);
      md.X.col(static_cast<Eigen::Index>(c) + 1) = Eigen::Map<const VectorXd>(v.data(), n);
      md.coef_names.push_back(ms.covariates[c]);
    }
    const auto yv = data.numeric(ms.response);
    md.y = Eigen::Map<const VectorXd>(yv.data(), n);
    md.trials = VectorXd::Ones(n);
    if (ms.family == FamilyId::binomial) {
      if (ms.trials) {
        const auto tv = data.numeric(*ms.trials);
        md.trials = Eigen::Map<const VectorXd>(tv.data(), n);
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!(md.trials[i] >= 1.0))
          throw DataError("binomial trial count must be >= 1 in row " + std::to_string(i + 1));
        md.y[i] /= md.trials[i];
      }
    }
    design.marginals.push_back(std::move(md));
  }
  for (const auto& cs : model.clusters) design.components.push_back(detail::make_component(cs.name, data.text(cs.column)));
  for (std::size_t r = 0; r < model.clusters.size(); ++r) {
    const auto& cs = model.clusters[r];
    if (!cs.nested_in) continue;
    const int p = detail::component_position(model, *cs.nested_in);
    if (p < 0 || p == static_cast<int>(r))
      throw ConfigError("cluster '" + cs.name + "' is nested in unknown cluster '" + *cs.nested_in + "'");
    std::vector<int> conflicting;
    auto map = detail::nesting_map(design.components[r], design.components[p], &conflicting);
    if (!conflicting.empty())
      throw DataError("cluster '" + design.components[r].labels[conflicting.front()] + "' of '" + cs.name +
                      "' belongs to more than one '" + *cs.nested_in + "' cluster");
    design.components[r].parent = p;
    design.components[r].parent_of = std::move(map);
  }
  // nesting chains must be acyclic and a parent may have one child component
  std::vector<int> children(design.components.size(), 0);
  for (const auto& c : design.components)
    if (c.parent >= 0) ++children[c.parent];
  for (std::size_t r = 0; r < design.components.size(); ++r) {
    if (children[r] > 1)
      throw ConfigError("cluster '" + design.components[r].name + "' has more than one nested child component");
    int steps = 0;
    for (int p = design.components[r].parent; p >= 0; p = design.components[p].parent)
      if (++steps > static_cast<int>(design.components.size())) throw ConfigError("cyclic nesting");
  }
  return design;
}

struct DesignMatrices {
  std::vector<MatrixXd> X;  // per marginal
  std::vector<MatrixXd> Z;  // per component, n x q_r allocation
};

inline MatrixXd allocation_matrix(const ClusterComponent& c) {
  MatrixXd Z = MatrixXd::Zero(static_cast<Eigen::Index>(c.index.size()), c.q);
  for (std::size_t i = 0; i < c.index.size(); ++i) Z(static_cast<Eigen::Index>(i), c.index[i]) = 1.0;
  return Z;
}

/// Child-cluster to parent-cluster indicator (q_child x q_parent).
inline MatrixXd nesting_matrix(const ClusterComponent& child, int q_parent) {
  MatrixXd C = MatrixXd::Zero(child.q, q_parent);
  for (int c = 0; c < child.q; ++c) C(c, child.parent_of[c]) = 1.0;
  return C;
}

inline DesignMatrices build_matrices(const ModelSpec& model, const Dataset& data) {
  const ModelDesign d = build_design(model, data);
  DesignMatrices out;
  for (const auto& m : d.marginals) out.X.push_back(m.X);
  for (const auto& c : d.components) out.Z.push_back(allocation_matrix(c));
  return out;
}

// ---------------------------------------------------------------------------
// validation

struct ValidationReport {
  struct RankCheck {
    std::string what;
    Eigen::Index rank;
    Eigen::Index required;
  };
  std::vector<RankCheck> ranks;
  std::vector<std::string> support_violations;
  std::vector<std::string> empty_clusters;
  std::vector<std::string> nesting_issues;
  std::vector<std::string> errors;  // structural problems (missing columns, bad config)

  bool ok() const {
    bool rank_ok = std::all_of(ranks.begin(), ranks.end(), [](const RankCheck& r) { return r.rank == r.required; });
    return rank_ok && support_violations.empty() && empty_clusters.empty() && nesting_issues.empty() && errors.empty();
  }

  std::vector<std::string> messages() const {
    std::vector<std::string> out = errors;
    for (const auto& r : ranks)
      if (r.rank != r.required)
        out.push_back(r.what + " is rank deficient (rank " + std::to_string(r.rank) + " < " +
                      std::to_string(r.required) + ")");
    for (const auto& v : {support_violations, empty_clusters, nesting_issues}) out.insert(out.end(), v.begin(), v.end());
    return out;
  }
};

/// Numerical rank with tolerance 1e-10 times the largest singular value.
inline Eigen::Index numerical_rank(const MatrixXd& A) {
  if (A.size() == 0) return 0;
  Eigen::JacobiSVD<MatrixXd> svd(A);
  const VectorXd& s = svd.singularValues();
  const double tol = 1e-10 * s[0];
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s[i] > tol) ++r;
  return r;
}

inline ValidationReport validate(const ModelSpec& model, const Dataset& data) {
  ValidationReport rep;
  for (const auto& ms : model.marginals) {
    for (const auto& col : ms.covariates)
      if (!data.has_column(col)) rep.errors.push_back("missing column '" + col + "'");
    if (!data.has_column(ms.response)) rep.errors.push_back("missing column '" + ms.response + "'");
    if (ms.trials && !data.has_column(*ms.trials)) rep.errors.push_back("missing column '" + *ms.trials + "'");
    if (!link_compatible(ms.family, ms.link))
      rep.errors.push_back("link '" + std::string(to_string(ms.link)) + "' is incompatible with family '" +
                           std::string(to_string(ms.family)) + "'");
  }
  for (const auto& cs : model.clusters) {
    if (!data.has_column(cs.column)) rep.errors.push_back("missing column '" + cs.column + "'");
    if (cs.nested_in && detail::component_position(model, *cs.nested_in) < 0)
      rep.errors.push_back("cluster '" + cs.name + "' is nested in unknown cluster '" + *cs.nested_in + "'");
  }
  if (model.random_dist.kind == RandomDist::Kind::student_t && !(model.random_dist.dof > 4.0))
    rep.errors.push_back("student_t random components need dof > 4");
  if (data.n_rows() == 0) rep.errors.push_back("data has no rows");
  if (!rep.errors.empty()) return rep;

  // columns exist; numeric problems become errors
  for (std::size_t j = 0; j < model.marginals.size(); ++j) {
    const auto& ms = model.marginals[j];
    MatrixXd X(static_cast<Eigen::Index>(data.n_rows()), 1 + static_cast<Eigen::Index>(ms.covariates.size()));
    X.col(0).setOnes();
    try {
      for (std::size_t c = 0; c < ms.covariates.size(); ++c) {
        auto v = data.numeric(ms.covariates[c]);
        X.col(static_cast<Eigen::Index>(c) + 1) = Eigen::Map<VectorXd>(v.data(), X.rows());
      }
      rep.ranks.push_back({"X of marginal '" + ms.response + "'", numerical_rank(X), X.cols()});
      auto y = data.numeric(ms.response);
      std::vector<double> trials(y.size(), 1.0);
      if (ms.family == FamilyId::binomial && ms.trials) trials = data.numeric(*ms.trials);
      int shown = 0;
      for (std::size_t i = 0; i < y.size(); ++i) {
        double yi = y[i];
        bool ok = true;
        if (ms.family == FamilyId::binomial) {
          ok = trials[i] >= 1.0 && yi >= 0.0 && yi <= trials[i] && yi == std::floor(yi);
        } else {
          ok = in_support(ms.family, yi);
        }
        if (!ok && shown++ < 10)
          rep.support_violations.push_back("response '" + ms.response + "' row " + std::to_string(i + 1) +
                                           " value " + data.text(ms.response)[i] + " outside the " +
                                           std::string(to_string(ms.family)) + " support");
      }
    } catch (const DataError& e) {
      rep.errors.push_back(e.what());
    }
  }
  std::vector<ClusterComponent> comps;
  for (const auto& cs : model.clusters) comps.push_back(detail::make_component(cs.name, data.text(cs.column)));
  for (const auto& c : comps) {
    // allocation columns are orthogonal; singular values are sqrt(cluster sizes)
    std::vector<int> size(c.q, 0);
    for (int i : c.index) ++size[i];
    Eigen::Index rank = 0;
    for (int r = 0; r < c.q; ++r) {
      if (size[r] > 0) {
        ++rank;
      } else {
        rep.empty_clusters.push_back("cluster '" + c.labels[r] + "' of '" + c.name + "' is empty");
      }
    }
    rep.ranks.push_back({"Z of cluster '" + c.name + "'", rank, c.q});
  }
  for (std::size_t r = 0; r < model.clusters.size(); ++r) {
    const auto& cs = model.clusters[r];
    if (!cs.nested_in) continue;
    const int p = detail::component_position(model, *cs.nested_in);
    std::vector<int> conflicting;
    detail::nesting_map(comps[r], comps[p], &conflicting);
    for (int c : conflicting)
      rep.nesting_issues.push_back("cluster '" + comps[r].labels[c] + "' of '" + cs.name +
                                   "' maps to more than one '" + *cs.nested_in + "' cluster");
  }
  return rep;
}

}  // namespace cglmm
