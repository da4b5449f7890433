#pragma once

#include "etdmpc/common.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace etdmpc {

/// Write via a temp file in the same directory, then rename, so readers
/// never observe a partially written file.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("atomic_write_file: cannot open " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("atomic_write_file: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_file: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::string to_string() const {
    std::ostringstream out;
    out << std::setprecision(17);
    for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
      for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
      out << "\n";
    }
    return out.str();
  }

  void write(const std::filesystem::path& path) const { atomic_write_file(path, to_string()); }

  int column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::runtime_error("CsvTable: no column named " + name);
  }

  static CsvTable parse(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string cell;
      if (first) {
        while (std::getline(ls, cell, ',')) t.header.push_back(cell);
        first = false;
      } else {
        std::vector<double> row;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        t.rows.push_back(std::move(row));
      }
    }
    return t;
  }

  static CsvTable read(const std::filesystem::path& path) { return parse(read_file(path)); }
};

// Minimal SVG line chart: one polyline per series, fixed viewport, axis box.
struct SvgSeries {
  std::string label;
  std::string color = "#1f77b4";
  std::vector<double> x, y;
};

inline std::string svg_line_chart(const std::vector<SvgSeries>& series, const std::string& title,
                                  int width = 640, int height = 400) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  const double ml = 60, mr = 20, mt = 40, mb = 40;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };
  std::ostringstream out;
  out << std::setprecision(8);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << (width - ml - mr)
      << "\" height=\"" << (height - mt - mb) << "\" fill=\"none\" stroke=\"#888\"/>\n";
  out << "<text x=\"" << ml << "\" y=\"" << height - 8 << "\" font-size=\"11\">" << xmin
      << "</text>\n";
  out << "<text x=\"" << width - mr << "\" y=\"" << height - 8
      << "\" text-anchor=\"end\" font-size=\"11\">" << xmax << "</text>\n";
  out << "<text x=\"4\" y=\"" << py(ymin) << "\" font-size=\"11\">" << ymin << "</text>\n";
  out << "<text x=\"4\" y=\"" << py(ymax) + 10 << "\" font-size=\"11\">" << ymax << "</text>\n";
  int li = 0;
  for (const auto& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) out << px(s.x[i]) << "," << py(s.y[i]) << " ";
    out << "\"/>\n";
    out << "<text x=\"" << width - mr - 4 << "\" y=\"" << mt + 16 + 14 * li++
        << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << s.color << "\">" << s.label
        << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace etdmpc
