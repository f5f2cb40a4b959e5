// Command-line front end: fit, simulate, study and asymptotics.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <cglmm/cglmm.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cglmm;

namespace {

constexpr const char* kVersion = "0.1.0";

struct CommonFlags {
  std::string config;
  std::string data;
  std::string out = "out";
  std::vector<std::string> methods;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  std::optional<int> max_iter;
  std::optional<int> replicates;
  int threads = 1;
};

struct RunContext {
  std::string command;
  json manifest;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

FitOptions fit_options(const CommonFlags& f) {
  FitOptions o;
  if (f.tol) o.outer_tol = *f.tol;
  if (f.max_iter) o.max_outer = *f.max_iter;
  return o;
}

void prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory '" + out + "'");
}

int finish(RunContext& ctx, const CommonFlags& f, int code, const std::string& error = "") {
  ctx.manifest["command"] = ctx.command;
  ctx.manifest["tool_version"] = kVersion;
  ctx.manifest["exit_code"] = code;
  if (!error.empty()) ctx.manifest["error"] = error;
  if (f.seed) ctx.manifest["seed"] = *f.seed;
  ctx.manifest["threads"] = f.threads;
  ctx.manifest["wall_time_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  try {
    prepare_out(f.out);
    write_file_atomic(fs::path(f.out) / "manifest.json", ctx.manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  if (!error.empty()) std::cerr << "error: " << error << "\n";
  return code;
}

json fit_summary(const FitResult& fr) {
  json conv = json::array();
  for (const auto& m : fr.marginals)
    conv.push_back({{"converged", m.converged}, {"iterations", m.iterations}, {"trace", m.trace}});
  json deg = json::array();
  for (const auto& m : fr.marginals) deg.push_back(m.degenerate);
  return {{"converged", fr.converged}, {"iterations", fr.iterations}, {"marginals", conv},
          {"degenerate_clusters", deg},  {"sigma_boundary", fr.sigma_boundary}, {"notes", fr.notes}};
}

int cmd_fit(const CommonFlags& f, RunContext& ctx) {
  const std::string method = f.methods.empty() ? "condinf" : f.methods.front();
  if (method != "condinf" && method != "laplace") throw ConfigError("fit supports --method condinf or laplace");
  ctx.manifest["method"] = method;
  const std::string data_bytes = read_file(f.data);
  ctx.manifest["data_checksum"] = "crc32:" + crc32_hex(data_bytes);
  const ModelSpec model = read_model(f.config);
  ctx.manifest["config"] = model;
  std::istringstream ds_in(data_bytes);
  const Dataset ds = read_csv(ds_in);
  const ValidationReport rep = validate(model, ds);
  if (!rep.ok()) {
    std::string msg = "validation failed";
    for (const auto& s : rep.messages()) msg += "; " + s;
    ctx.manifest["validation"] = rep.messages();
    throw DataError(msg);
  }
  const ModelDesign design = build_design(model, ds);
  const FitOptions opts = fit_options(f);
  ctx.manifest["options"] = {{"outer_tol", opts.outer_tol}, {"max_outer", opts.max_outer},
                             {"inner_tol", opts.inner_tol}, {"max_inner", opts.max_inner}};
  FitResult fr;
  if (method == "condinf") {
    fr = fit_conditional(design, opts);
  } else {
    LaplaceOptions lo;
    lo.fit = opts;
    fr = fit_laplace(design, lo);
  }
  prepare_out(f.out);
  const fs::path out(f.out);
  write_file_atomic(out / "estimates.csv", estimates_csv(design, fr));
  write_file_atomic(out / "random_components.csv", random_components_csv(design, fr));
  write_file_atomic(out / "covariance.csv", covariance_csv(design, fr));
  ctx.manifest["convergence"] = fit_summary(fr);
  return fr.converged ? 0 : 2;
}

json study_config_json(const SimConfig& sim, StudyKind kind, const std::vector<std::string>& methods) {
  json j = sim;
  j["kind"] = kind == StudyKind::normality ? "normality" : "bias";
  j["methods"] = methods;
  return j;
}

struct StudyConfig {
  StudyKind kind = StudyKind::bias;
  SimConfig sim;
  std::vector<std::string> methods;
};

StudyConfig read_study_config(const CommonFlags& f) {
  json j;
  try {
    j = json::parse(read_file(f.config));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid study configuration: ") + e.what());
  }
  StudyConfig sc;
  try {
    const std::string kind = j.value("kind", std::string("bias"));
    if (kind == "normality") {
      sc.kind = StudyKind::normality;
    } else if (kind == "bias") {
      sc.kind = StudyKind::bias;
    } else {
      throw ConfigError("unknown study kind '" + kind + "'");
    }
    sc.sim = j.get<SimConfig>();
    if (j.contains("methods")) {
      sc.methods = j.at("methods").get<std::vector<std::string>>();
    } else if (sc.kind == StudyKind::normality) {
      sc.methods = {"condinf"};
    } else {
      sc.methods = study_methods_all();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid study configuration: ") + e.what());
  }
  if (!f.methods.empty()) sc.methods = f.methods;
  if (f.seed) sc.sim.seed = *f.seed;
  if (f.replicates) sc.sim.replicates = *f.replicates;
  validate_sim(sc.sim);
  return sc;
}

int cmd_study(const CommonFlags& f, RunContext& ctx) {
  const StudyConfig sc = read_study_config(f);
  ctx.manifest["config"] = study_config_json(sc.sim, sc.kind, sc.methods);
  ctx.manifest["seed"] = sc.sim.seed;
  const StudyOutput so = run_study(sc.kind, sc.sim, sc.methods, f.threads, fit_options(f));
  prepare_out(f.out);
  const fs::path out(f.out);
  write_file_atomic(out / "estimates.csv", study_estimates_csv(so));
  if (sc.kind == StudyKind::bias) {
    write_file_atomic(out / "bias.csv", study_bias_csv(so));
  } else {
    write_file_atomic(out / "normality.csv", study_normality_csv(so));
    write_file_atomic(out / "qq_points.csv", study_qq_csv(so));
  }
  write_file_atomic(out / "failures.csv", study_failures_csv(so));
  json fails = json::array();
  bool flagged = false;
  for (const auto& r : so.failures) {
    fails.push_back({{"cell", r.cell}, {"method", r.method}, {"failures", r.failures}, {"total", r.total},
                     {"flagged", r.flagged}});
    flagged = flagged || r.flagged;
  }
  ctx.manifest["failures"] = fails;
  return flagged ? 2 : 0;
}

int cmd_simulate(const CommonFlags& f, RunContext& ctx, std::optional<double> c, std::optional<int> q, int replicate) {
  const StudyConfig sc = read_study_config(f);
  const double cc = c.value_or(sc.sim.const_grid.empty() ? 1.0 : sc.sim.const_grid.front());
  const int qq = q.value_or(sc.sim.q);
  ctx.manifest["config"] = study_config_json(sc.sim, sc.kind, sc.methods);
  ctx.manifest["seed"] = sc.sim.seed;
  ctx.manifest["const"] = cc;
  ctx.manifest["q"] = qq;
  ctx.manifest["replicate"] = replicate;
  const Dataset ds = simulate_dataset(sc.sim, cc, qq, static_cast<std::uint64_t>(replicate));
  prepare_out(f.out);
  const fs::path out(f.out);
  const std::string csv = dataset_csv(ds);
  write_file_atomic(out / "data.csv", csv);
  write_file_atomic(out / "model.json", json(sim_model(sc.sim)).dump(2) + "\n");
  ctx.manifest["data_checksum"] = "crc32:" + crc32_hex(csv);
  return 0;
}

int cmd_asymptotics(const CommonFlags& f, RunContext& ctx) {
  const std::string data_bytes = read_file(f.data);
  ctx.manifest["data_checksum"] = "crc32:" + crc32_hex(data_bytes);
  const ModelSpec model = read_model(f.config);
  ctx.manifest["config"] = model;
  std::istringstream ds_in(data_bytes);
  const Dataset ds = read_csv(ds_in);
  const ValidationReport rep = validate(model, ds);
  if (!rep.ok()) {
    std::string msg = "validation failed";
    for (const auto& s : rep.messages()) msg += "; " + s;
    throw DataError(msg);
  }
  const ModelDesign design = build_design(model, ds);
  const FitOptions opts = fit_options(f);
  const FitResult fr = fit_conditional(design, opts);
  ctx.manifest["convergence"] = fit_summary(fr);
  const int n_mc = f.replicates.value_or(200);
  const std::uint64_t seed = f.seed.value_or(1);
  ctx.manifest["seed"] = seed;
  ctx.manifest["replicates"] = n_mc;
  const std::vector<UnconditionalAV> av = unconditional_av(design, fr, n_mc, seed, opts, f.threads);
  CsvTable beta_t({"marginal", "term", "row", "col", "value"});
  CsvTable b_t({"marginal", "term", "row", "col", "value"});
  json draws = json::array();
  for (std::size_t j = 0; j < av.size(); ++j) {
    const auto& md = design.marginals[j];
    const auto& u = av[j];
    auto emit = [&](CsvTable& t, const char* term, const MatrixXd& M, const std::vector<std::string>& names) {
      for (Eigen::Index a = 0; a < M.rows(); ++a)
        for (Eigen::Index b = 0; b < M.cols(); ++b)
          t.add(md.response, term, names[static_cast<std::size_t>(a)], names[static_cast<std::size_t>(b)], M(a, b));
    };
    emit(beta_t, "mean_J_inv", u.mean_J_inv_beta, md.coef_names);
    emit(beta_t, "var_beta", u.var_beta, md.coef_names);
    emit(beta_t, "AV", u.AV_beta, md.coef_names);
    emit(b_t, "mean_J_inv", u.mean_J_inv_b, design.components[0].labels);
    emit(b_t, "AV", u.AV_b, design.components[0].labels);
    draws.push_back({{"marginal", md.response}, {"draws", u.draws}, {"failures", u.failures}});
  }
  prepare_out(f.out);
  const fs::path out(f.out);
  write_file_atomic(out / "av_beta.csv", beta_t.str());
  write_file_atomic(out / "av_b.csv", b_t.str());
  ctx.manifest["monte_carlo"] = draws;
  return fr.converged ? 0 : 2;
}

void add_common(CLI::App* sub, CommonFlags& f, bool data, bool method) {
  sub->add_option("--config", f.config, "configuration file (JSON)")->required()->check(CLI::ExistingFile);
  if (data) sub->add_option("--data", f.data, "data file (CSV with header)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", f.out, "output directory");
  if (method) sub->add_option("--method", f.methods, "estimation method(s)")->delimiter(',');
  sub->add_option("--seed", f.seed, "random seed");
  sub->add_option("--tol", f.tol, "outer convergence tolerance")->check(CLI::PositiveNumber);
  sub->add_option("--max-iter", f.max_iter, "maximum outer iterations")->check(CLI::PositiveNumber);
  sub->add_option("--replicates", f.replicates, "Monte Carlo replicates")->check(CLI::PositiveNumber);
  sub->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional-inference fitting of (multivariate) generalized linear mixed models"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  CommonFlags f;
  std::optional<double> sim_const;
  std::optional<int> sim_q;
  int sim_rep = 0;
  auto* fit = app.add_subcommand("fit", "fit a model to a data file");
  add_common(fit, f, true, true);
  auto* sim = app.add_subcommand("simulate", "simulate one data set of a study design");
  add_common(sim, f, false, false);
  sim->add_option("--const", sim_const, "variance multiplier")->check(CLI::PositiveNumber);
  sim->add_option("--q", sim_q, "number of clusters")->check(CLI::PositiveNumber);
  sim->add_option("--replicate", sim_rep, "replicate index")->check(CLI::NonNegativeNumber);
  auto* study = app.add_subcommand("study", "run a normality or bias simulation study");
  add_common(study, f, false, true);
  auto* asym = app.add_subcommand("asymptotics", "Monte Carlo unconditional asymptotic variances");
  add_common(asym, f, true, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  RunContext ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  try {
    int code = 0;
    if (*fit) code = cmd_fit(f, ctx);
    if (*sim) code = cmd_simulate(f, ctx, sim_const, sim_q, sim_rep);
    if (*study) code = cmd_study(f, ctx);
    if (*asym) code = cmd_asymptotics(f, ctx);
    return finish(ctx, f, code);
  } catch (const FitError& e) {
    return finish(ctx, f, 2, e.what());
  } catch (const std::exception& e) {
    return finish(ctx, f, 1, e.what());
  }
}
