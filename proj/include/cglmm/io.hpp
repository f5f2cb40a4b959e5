#pragma once

// Output helpers: full-precision number formatting, atomic file writes,
// checksums and result tables.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "dataset.hpp"
#include "fit_result.hpp"
#include "model.hpp"
#include "simulation.hpp"

namespace cglmm {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 17 significant digits, "NA" for non-finite values.
inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

/// Writes `content` to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline std::string crc32_hex(const std::string& bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc.checksum();
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small CSV builder with quoting of fields that need it.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) { row(header); }

  template <typename... Ts>
  void add(const Ts&... fields) {
    std::vector<std::string> cells{cell(fields)...};
    row(cells);
  }

  const std::string& str() const { return text_; }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_number(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(long v) { return std::to_string(v); }
  static std::string cell(long long v) { return std::to_string(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "true" : "false"; }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      const std::string& c = cells[i];
      if (c.find_first_of(",\"\n") != std::string::npos) {
        text_ += '"';
        for (char ch : c) {
          if (ch == '"') text_ += '"';
          text_ += ch;
        }
        text_ += '"';
      } else {
        text_ += c;
      }
    }
    text_ += '\n';
  }

  std::string text_;
};

inline std::string dataset_csv(const Dataset& ds) {
  std::ostringstream os;
  write_csv(os, ds);
  return os.str();
}

// ---------------------------------------------------------------------------
// fit outputs

inline std::string estimates_csv(const ModelDesign& design, const FitResult& fit) {
  CsvTable t({"parameter", "value", "std_error"});
  for (std::size_t j = 0; j < fit.marginals.size(); ++j) {
    const auto& md = design.marginals[j];
    const auto& mf = fit.marginals[j];
    for (Eigen::Index l = 0; l < mf.beta.size(); ++l) {
      const double se = mf.beta_cov.rows() == mf.beta.size() && mf.beta_cov(l, l) >= 0.0
                            ? std::sqrt(mf.beta_cov(l, l))
                            : std::numeric_limits<double>::quiet_NaN();
      t.add(md.response + ":" + md.coef_names[static_cast<std::size_t>(l)], mf.beta[l], se);
    }
    t.add(md.response + ":lambda", mf.lambda, std::numeric_limits<double>::quiet_NaN());
  }
  return t.str();
}

inline std::string random_components_csv(const ModelDesign& design, const FitResult& fit) {
  CsvTable t({"component", "cluster", "marginal", "value"});
  for (std::size_t r = 0; r < design.components.size(); ++r) {
    const auto& comp = design.components[r];
    for (int c = 0; c < comp.q; ++c)
      for (std::size_t j = 0; j < fit.marginals.size(); ++j)
        t.add(comp.name, comp.labels[static_cast<std::size_t>(c)], design.marginals[j].response,
              fit.marginals[j].b[r][c]);
  }
  return t.str();
}

inline std::string covariance_csv(const ModelDesign& design, const FitResult& fit) {
  CsvTable t({"component", "row", "col", "value"});
  for (std::size_t r = 0; r < fit.Sigma.size() && r < design.components.size(); ++r) {
    const MatrixXd& S = fit.Sigma[r];
    for (Eigen::Index a = 0; a < S.rows(); ++a)
      for (Eigen::Index b = 0; b < S.cols(); ++b)
        t.add(design.components[r].name, design.marginals[static_cast<std::size_t>(a)].response,
              design.marginals[static_cast<std::size_t>(b)].response, S(a, b));
  }
  return t.str();
}

// ---------------------------------------------------------------------------
// study outputs

inline std::string study_estimates_csv(const StudyOutput& s) {
  CsvTable t({s.kind == StudyKind::bias ? "q" : "const", "method", "replicate", "parameter", "value"});
  for (const auto& e : s.estimates) t.add(e.cell, e.method, e.replicate, e.parameter, e.value);
  return t.str();
}

inline std::string study_bias_csv(const StudyOutput& s) {
  CsvTable t({"parameter", "q", "method", "bias", "se", "n"});
  for (const auto& b : s.bias) t.add(b.parameter, b.q, b.method, b.bias, b.se, b.n_ok);
  return t.str();
}

inline std::string study_normality_csv(const StudyOutput& s) {
  CsvTable t({"parameter", "const", "method", "qq_correlation", "n"});
  for (const auto& r : s.normality) t.add(r.parameter, r.c, r.method, r.qq_correlation, r.n_ok);
  return t.str();
}

inline std::string study_qq_csv(const StudyOutput& s) {
  CsvTable t({"parameter", "const", "method", "theoretical", "sample"});
  for (const auto& p : s.qq_points) t.add(p.parameter, p.c, p.method, p.theoretical, p.sample);
  return t.str();
}

inline std::string study_failures_csv(const StudyOutput& s) {
  CsvTable t({s.kind == StudyKind::bias ? "q" : "const", "method", "failures", "total", "flagged"});
  for (const auto& f : s.failures) t.add(f.cell, f.method, f.failures, f.total, f.flagged);
  return t.str();
}

}  // namespace cglmm
