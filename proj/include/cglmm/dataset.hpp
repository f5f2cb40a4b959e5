#pragma once

// Tabular data: named columns of raw text cells, read from comma-separated
// files with a header row.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cglmm {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Dataset {
 public:
  Dataset() = default;

  /// Adds a column; all columns must share one length.
  void add_column(std::string name, std::vector<std::string> cells) {
    if (!names_.empty() && cells.size() != n_rows_)
      throw DataError("column '" + name + "' has " + std::to_string(cells.size()) +
                      " rows, expected " + std::to_string(n_rows_));
    if (index_.count(name)) throw DataError("duplicate column '" + name + "'");
    n_rows_ = cells.size();
    index_[name] = columns_.size();
    names_.push_back(std::move(name));
    columns_.push_back(std::move(cells));
  }

  void add_column(std::string name, const std::vector<double>& values) {
    std::vector<std::string> cells;
    cells.reserve(values.size());
    for (double v : values) cells.push_back(format_double(v));
    add_column(std::move(name), std::move(cells));
  }

  std::size_t n_rows() const { return n_rows_; }
  const std::vector<std::string>& names() const { return names_; }
  bool has_column(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  const std::vector<std::string>& text(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw DataError("missing column '" + std::string(name) + "'");
    return columns_[it->second];
  }

  std::vector<double> numeric(std::string_view name) const {
    const auto& cells = text(name);
    std::vector<double> out(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!parse_double(cells[i], out[i]))
        throw DataError("non-numeric value '" + cells[i] + "' in column '" + std::string(name) +
                        "' row " + std::to_string(i + 1));
    }
    return out;
  }

  /// Shortest round-trip representation (17 significant digits at most).
  static std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  }

  static bool parse_double(std::string_view s, double& out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
  }

  bool operator==(const Dataset& o) const { return names_ == o.names_ && columns_ == o.columns_; }

 private:
  std::size_t n_rows_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<std::string>> columns_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline Dataset read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty data file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  std::vector<std::vector<std::string>> cols(header.size());
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " fields, header has " + std::to_string(header.size()));
    for (std::size_t j = 0; j < cells.size(); ++j) cols[j].push_back(std::move(cells[j]));
  }
  Dataset ds;
  for (std::size_t j = 0; j < header.size(); ++j) ds.add_column(header[j], std::move(cols[j]));
  return ds;
}

inline Dataset read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  return read_csv(in);
}

inline void write_csv(std::ostream& out, const Dataset& ds) {
  const auto& names = ds.names();
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  out << '\n';
  std::vector<const std::vector<std::string>*> cols;
  for (const auto& n : names) cols.push_back(&ds.text(n));
  for (std::size_t i = 0; i < ds.n_rows(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << (*cols[j])[i];
    out << '\n';
  }
}

}  // namespace cglmm
