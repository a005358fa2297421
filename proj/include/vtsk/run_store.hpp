// SPDX-License-Identifier: Apache-2.0
//
// Run-log ingestion and persistence: the model,data_size,steps,metric,value
// CSV schema (with K/M/B magnitude suffixes), the published-shape table, the
// FLOPs-proxy compute attachment, and deterministic CSV/SVG plot emission.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/scaling_laws.hpp"

namespace vtsk {

struct RunTable {
  std::vector<RunRecord> records;
  std::string source_path;
  std::uint64_t checksum = 0;  // FNV-1a 64 over the raw file bytes
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

/// Parses "400K", "1.2M", "3B" or a plain integer into a count.
inline std::int64_t parse_scaled_count(const std::string& raw, int line_no) {
  if (raw.empty()) throw DataError("line " + std::to_string(line_no) + ": empty count");
  double multiplier = 1.0;
  std::string digits = raw;
  switch (raw.back()) {
    case 'K': multiplier = 1e3; digits.pop_back(); break;
    case 'M': multiplier = 1e6; digits.pop_back(); break;
    case 'B': multiplier = 1e9; digits.pop_back(); break;
    default:
      if (!std::isdigit(static_cast<unsigned char>(raw.back())))
        throw DataError("line " + std::to_string(line_no) + ": unknown suffix in '" + raw + "'");
  }
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(digits, &used);
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": bad number '" + raw + "'");
  }
  if (used != digits.size() || value < 0)
    throw DataError("line " + std::to_string(line_no) + ": bad number '" + raw + "'");
  const double scaled = value * multiplier;
  if (scaled != std::floor(scaled))
    throw DataError("line " + std::to_string(line_no) + ": '" + raw +
                    "' is not a whole count");
  return static_cast<std::int64_t>(scaled);
}

inline double parse_double(const std::string& raw, int line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(raw, &used);
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": bad value '" + raw + "'");
  }
  if (used != raw.size())
    throw DataError("line " + std::to_string(line_no) + ": bad value '" + raw + "'");
  return v;
}

}  // namespace detail

/// Reads a run CSV (header model,data_size,steps,metric,value; value is an
/// accuracy percentage). Rejects malformed rows and duplicate
/// (model, data_size, steps, metric) keys with their line numbers. An empty
/// file yields an empty table.
inline RunTable parse_runs_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open runs csv: " + path);
  std::stringstream buffer;
  buffer << f.rdbuf();
  const std::string bytes = buffer.str();

  RunTable table;
  table.source_path = path;
  table.checksum = detail::fnv1a64(bytes);

  std::istringstream in(bytes);
  std::string line;
  int line_no = 0;
  std::set<std::string> keys;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (!saw_header) {
      auto cells = detail::split_csv_line(line);
      if (cells != std::vector<std::string>{"model", "data_size", "steps", "metric", "value"})
        throw DataError("line 1: expected header model,data_size,steps,metric,value");
      saw_header = true;
      continue;
    }
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 5)
      throw DataError("line " + std::to_string(line_no) + ": expected 5 fields, got " +
                      std::to_string(cells.size()));
    RunRecord r;
    r.model_name = cells[0];
    r.dataset_size = detail::parse_scaled_count(cells[1], line_no);
    r.steps = detail::parse_scaled_count(cells[2], line_no);
    r.metric_name = cells[3];
    const double percent = detail::parse_double(cells[4], line_no);
    if (percent < 0.0 || percent > 100.0)
      throw DataError("line " + std::to_string(line_no) + ": accuracy percent out of range");
    r.error_rate = 1.0 - percent / 100.0;
    const std::string key =
        r.model_name + "|" + cells[1] + "|" + cells[2] + "|" + r.metric_name;
    if (!keys.insert(key).second)
      throw DataError("line " + std::to_string(line_no) + ": duplicate key " + key);
    table.records.push_back(std::move(r));
  }
  return table;
}

/// Inverse of parse_runs_csv up to suffix normalization: counts are written
/// plain, values with full double precision.
inline void write_runs_csv(const RunTable& table, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write runs csv: " + path);
  f << "model,data_size,steps,metric,value\n";
  char buf[64];
  for (const RunRecord& r : table.records) {
    std::snprintf(buf, sizeof(buf), "%.17g", 100.0 * (1.0 - r.error_rate));
    f << r.model_name << "," << r.dataset_size << "," << r.steps << "," << r.metric_name << ","
      << buf << "\n";
  }
}

// ---------------------------------------------------------------------------
// Published shape table (name,width,depth,mlp,heads,params_mio,gflops_224,
// gflops_384) and the compute proxy.
// ---------------------------------------------------------------------------

struct ShapeTableRow {
  std::string name;
  std::int64_t width = 0, depth = 0, mlp = 0, heads = 0;
  double params_mio = 0.0;
  double gflops_224 = 0.0;
  double gflops_384 = 0.0;

  std::int64_t patch() const {
    const auto slash = name.find('/');
    if (slash == std::string::npos)
      throw DataError("shape name lacks a patch suffix: " + name);
    return std::stoll(name.substr(slash + 1));
  }
};

inline std::vector<ShapeTableRow> parse_shape_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open shape table: " + path);
  std::vector<ShapeTableRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (line_no == 1) continue;  // header
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 8)
      throw DataError("line " + std::to_string(line_no) + ": expected 8 fields in " + path);
    ShapeTableRow r;
    r.name = cells[0];
    r.width = detail::parse_scaled_count(cells[1], line_no);
    r.depth = detail::parse_scaled_count(cells[2], line_no);
    r.mlp = detail::parse_scaled_count(cells[3], line_no);
    r.heads = detail::parse_scaled_count(cells[4], line_no);
    r.params_mio = detail::parse_double(cells[5], line_no);
    r.gflops_224 = detail::parse_double(cells[6], line_no);
    r.gflops_384 = detail::parse_double(cells[7], line_no);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// compute = steps * batch * gflops_224 * 1e-9, i.e. exaFLOPs of pre-training
/// at the normalized batch size. Also fills images_seen.
inline void attach_compute(RunTable& table, const std::vector<ShapeTableRow>& shapes,
                           std::int64_t batch = 4096) {
  if (batch < 1) throw ValueError("batch must be >= 1");
  for (RunRecord& r : table.records) {
    const ShapeTableRow* row = nullptr;
    for (const auto& s : shapes)
      if (s.name == r.model_name) {
        row = &s;
        break;
      }
    if (!row) throw DataError("model '" + r.model_name + "' not present in the shape table");
    if (r.steps <= 0)
      throw DataError("run for '" + r.model_name + "' has zero steps; compute undefined");
    r.images_seen = r.steps * batch;
    r.compute = static_cast<double>(r.images_seen) * row->gflops_224 * 1e-9;
    r.validate();
  }
}

// ---------------------------------------------------------------------------
// Plot emission: exact CSV, or a deterministic single-polyline log-log SVG.
// ---------------------------------------------------------------------------

struct CurvePoint {
  double compute = 0.0;
  double observed = std::nan("");   // scatter marker; NaN = absent
  double predicted = std::nan("");  // polyline; NaN = absent
};

enum class PlotFormat { kCsv, kSvg };

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

inline void emit_plot(const std::vector<CurvePoint>& points, const std::string& path,
                      PlotFormat format) {
  if (points.empty()) throw ValueError("emit_plot needs at least one point");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write plot: " + path);

  if (format == PlotFormat::kCsv) {
    f << "compute,observed,predicted\n";
    for (const auto& p : points)
      f << detail::fmt17(p.compute) << "," << detail::fmt17(p.observed) << ","
        << detail::fmt17(p.predicted) << "\n";
    return;
  }

  // log-log SVG, 800x600, fixed margins
  const double W = 800, H = 600, ml = 70, mr = 20, mt = 20, mb = 50;
  double min_x = HUGE_VAL, max_x = -HUGE_VAL, min_y = HUGE_VAL, max_y = -HUGE_VAL;
  auto consider = [&](double x, double y) {
    if (!(x > 0.0) || !(y > 0.0) || std::isnan(y)) return;
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  };
  for (const auto& p : points) {
    consider(p.compute, p.observed);
    consider(p.compute, p.predicted);
  }
  if (min_x > max_x) throw ValueError("emit_plot: no positive points to draw");
  if (min_x == max_x) {
    min_x /= 2.0;
    max_x *= 2.0;
  }
  if (min_y == max_y) {
    min_y /= 2.0;
    max_y *= 2.0;
  }
  auto sx = [&](double x) {
    return ml + (std::log10(x) - std::log10(min_x)) / (std::log10(max_x) - std::log10(min_x)) *
                    (W - ml - mr);
  };
  auto sy = [&](double y) {
    return H - mb - (std::log10(y) - std::log10(min_y)) /
                        (std::log10(max_y) - std::log10(min_y)) * (H - mt - mb);
  };

  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" "
       "viewBox=\"0 0 800 600\">\n";
  f << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"600\" fill=\"white\"/>\n";
  f << "<rect x=\"" << detail::fmt2(ml) << "\" y=\"" << detail::fmt2(mt) << "\" width=\""
    << detail::fmt2(W - ml - mr) << "\" height=\"" << detail::fmt2(H - mt - mb)
    << "\" fill=\"none\" stroke=\"black\"/>\n";

  std::string polyline;
  for (const auto& p : points) {
    if (std::isnan(p.predicted) || !(p.predicted > 0.0) || !(p.compute > 0.0)) continue;
    polyline += detail::fmt2(sx(p.compute)) + "," + detail::fmt2(sy(p.predicted)) + " ";
  }
  if (!polyline.empty())
    f << "<polyline points=\"" << polyline
      << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
  for (const auto& p : points) {
    if (std::isnan(p.observed) || !(p.observed > 0.0) || !(p.compute > 0.0)) continue;
    f << "<circle cx=\"" << detail::fmt2(sx(p.compute)) << "\" cy=\""
      << detail::fmt2(sy(p.observed)) << "\" r=\"4\" fill=\"#d62728\"/>\n";
  }
  f << "<text x=\"" << detail::fmt2(W / 2) << "\" y=\"" << detail::fmt2(H - 12)
    << "\" text-anchor=\"middle\" font-family=\"monospace\">compute (log)</text>\n";
  f << "<text x=\"16\" y=\"" << detail::fmt2(H / 2)
    << "\" text-anchor=\"middle\" font-family=\"monospace\" transform=\"rotate(-90 16 "
    << detail::fmt2(H / 2) << ")\">error rate (log)</text>\n";
  f << "</svg>\n";
}

}  // namespace vtsk
