#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "ssmkit/models.hpp"

namespace ssmkit {

/// Shortest decimal string that round-trips to the same double.  Infinities
/// and NaN are spelled "inf", "-inf", "nan" so they survive a read-back.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  return v;
}

/// Minimal CSV container: header row plus string cells.  Cells never contain
/// commas or quotes in this toolkit, so no quoting rules are needed.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);  // binary: byte-stable line endings
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  const auto put_row = [&out](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out.put(',');
      out << cells[i];
    }
    out.put('\n');
  };
  put_row(table.header);
  for (const auto& row : table.rows) put_row(row);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  CsvTable table;
  std::string line;
  const auto split = [](const std::string& text) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(text);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!text.empty() && text.back() == ',') cells.emplace_back();
    return cells;
  };
  if (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    table.header = split(line);
  }
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    table.rows.push_back(split(line));
  }
  return table;
}

/// Layout: step, x1..xn, y1..yd with one row per step k = 0..T.  There is no
/// measurement at k = 0, so those cells are left empty.
inline void write_simulation_csv(const std::filesystem::path& path, const SimOutput& sim) {
  const int n = static_cast<int>(sim.states.rows());
  const int d = static_cast<int>(sim.measurements.rows());
  const int t_len = static_cast<int>(sim.measurements.cols());
  CsvTable table;
  table.header.emplace_back("step");
  for (int i = 1; i <= n; ++i) table.header.push_back("x" + std::to_string(i));
  for (int i = 1; i <= d; ++i) table.header.push_back("y" + std::to_string(i));
  table.rows.reserve(t_len + 1);
  for (int k = 0; k <= t_len; ++k) {
    std::vector<std::string> row;
    row.reserve(1 + n + d);
    row.push_back(std::to_string(k));
    for (int i = 0; i < n; ++i) row.push_back(format_double(sim.states(i, k)));
    for (int i = 0; i < d; ++i) row.push_back(k == 0 ? "" : format_double(sim.measurements(i, k - 1)));
    table.rows.push_back(std::move(row));
  }
  write_csv(path, table);
}

inline SimOutput read_simulation_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  int n = 0, d = 0;
  for (const auto& name : table.header) {
    if (!name.empty() && name[0] == 'x') ++n;
    if (!name.empty() && name[0] == 'y') ++d;
  }
  if (n == 0 || table.header.empty() || table.header[0] != "step")
    throw std::runtime_error("not a simulation CSV: " + path.string());
  const int t_len = static_cast<int>(table.rows.size()) - 1;
  if (t_len < 0) throw std::runtime_error("empty simulation CSV: " + path.string());
  SimOutput sim;
  sim.states = Mat::Zero(n, t_len + 1);
  sim.measurements = Mat::Zero(d, t_len);
  for (int k = 0; k <= t_len; ++k) {
    const auto& row = table.rows[static_cast<size_t>(k)];
    if (static_cast<int>(row.size()) < 1 + n + (k == 0 ? 0 : d))
      throw std::runtime_error("short row in " + path.string());
    for (int i = 0; i < n; ++i) sim.states(i, k) = parse_double(row[static_cast<size_t>(1 + i)]);
    if (k > 0)
      for (int i = 0; i < d; ++i)
        sim.measurements(i, k - 1) = parse_double(row[static_cast<size_t>(1 + n + i)]);
  }
  return sim;
}

}  // namespace ssmkit
