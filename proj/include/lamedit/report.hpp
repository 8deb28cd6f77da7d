#pragma once

// Method x language comparison tables (CSV and Markdown) and SVG line
// charts for sweeps. Output is a pure function of the inputs.

#include "lamedit/harness.hpp"
#include "lamedit/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace lamedit {

struct ReportRow {
  std::string label;
  std::map<std::uint32_t, double> averaged;  // language index -> averaged accuracy
  double avg = 0.0;                          // cross-language mean of the run
};

struct ReportTable {
  std::vector<std::uint32_t> languages;  // column order
  std::vector<ReportRow> rows;           // sorted by label
};

namespace detail {

inline std::string qualified_label(const MetricsReport& r) {
  std::string s = r.method + " [" + std::string(to_string(r.solver)) + ", alpha=" + format_number(r.alpha);
  if (r.method.find("TSVM") != std::string::npos) s += ", r=" + format_number(r.rank_ratio);
  return s + "]";
}

}  // namespace detail

// Rows keep the method name; when two reports share a name the solver and
// the scale settings are appended to keep rows apart. Refuses reports with
// different seeds unless allow_mixed.
inline ReportTable build_report(std::vector<MetricsReport> reports, bool allow_mixed) {
  if (reports.empty()) throw ConfigError("report needs at least one run");
  if (!allow_mixed) {
    for (const auto& r : reports)
      if (r.seed != reports.front().seed)
        throw ConfigError("runs come from different dataset seeds (" + std::to_string(reports.front().seed) + " and " +
                          std::to_string(r.seed) + "); pass --allow-mixed to combine them");
  }
  std::map<std::string, int> uses;
  for (const auto& r : reports) ++uses[r.method];

  ReportTable t;
  std::set<std::uint32_t> langs;
  for (const auto& r : reports) {
    ReportRow row;
    row.label = uses[r.method] > 1 ? detail::qualified_label(r) : r.method;
    for (const auto& lr : r.rows) {
      row.averaged[lr.language_id.value] = lr.averaged;
      langs.insert(lr.language_id.value);
    }
    row.avg = r.mean().averaged;
    t.rows.push_back(std::move(row));
  }
  std::stable_sort(t.rows.begin(), t.rows.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  for (std::size_t i = 1; i < t.rows.size(); ++i)
    if (t.rows[i].label == t.rows[i - 1].label)
      throw ConfigError("report has two identical rows labelled '" + t.rows[i].label + "'");
  t.languages.assign(langs.begin(), langs.end());
  return t;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string report_csv(const ReportTable& t) {
  std::ostringstream s;
  s << "method";
  for (auto l : t.languages) s << "," << language_code(l);
  s << ",avg\n";
  for (const auto& row : t.rows) {
    s << csv_field(row.label);
    for (auto l : t.languages) {
      s << ",";
      if (auto it = row.averaged.find(l); it != row.averaged.end()) s << format_number(it->second);
    }
    s << "," << format_number(row.avg) << "\n";
  }
  return s.str();
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Per-column maxima in bold; ties are all bold.
inline std::string report_markdown(const ReportTable& t) {
  const std::size_t cols = t.languages.size() + 1;
  std::vector<double> best(cols, -1.0);
  auto cell = [&](const ReportRow& row, std::size_t c) -> std::optional<double> {
    if (c == t.languages.size()) return row.avg;
    if (auto it = row.averaged.find(t.languages[c]); it != row.averaged.end()) return it->second;
    return std::nullopt;
  };
  for (const auto& row : t.rows)
    for (std::size_t c = 0; c < cols; ++c)
      if (auto v = cell(row, c); v && *v > best[c]) best[c] = *v;

  std::ostringstream s;
  s << "| Method |";
  for (auto l : t.languages) s << " " << language_code(l) << " |";
  s << " avg |\n|---|";
  for (std::size_t c = 0; c < cols; ++c) s << "---:|";
  s << "\n";
  for (const auto& row : t.rows) {
    s << "| " << row.label << " |";
    for (std::size_t c = 0; c < cols; ++c) {
      const auto v = cell(row, c);
      if (!v) {
        s << "  |";
      } else if (*v == best[c]) {
        s << " **" << fixed4(*v) << "** |";
      } else {
        s << " " << fixed4(*v) << " |";
      }
    }
    s << "\n";
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// SVG line chart
// ---------------------------------------------------------------------------

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Sweep axis on x (linear), cross-language averaged accuracy on y in [0, 1].
inline std::string sweep_svg(const std::vector<SweepResult>& results, const std::string& title) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const double width = 720, height = 440, left = 64, right = 170, top = 40, bottom = 56;
  const double pw = width - left - right, ph = height - top - bottom;

  double lo = 0.0, hi = 1.0;
  bool first = true;
  for (const auto& r : results)
    for (double g : r.grid) {
      lo = first ? g : std::min(lo, g);
      hi = first ? g : std::max(hi, g);
      first = false;
    }
  const double span = hi > lo ? hi - lo : 1.0;
  auto x_of = [&](double g) { return hi > lo ? left + (g - lo) / span * pw : left + pw / 2; };
  auto y_of = [&](double v) { return top + (1.0 - v) * ph; };
  const std::string axis = results.empty() ? "" : results.front().axis;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
    << width << " " << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<!-- lamedit " << kLamEditVersion << " -->\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fmt2(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title)
    << "</text>\n";
  // grid lines and y ticks
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0, y = y_of(v);
    s << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(y) << "\" x2=\"" << fmt2(left + pw) << "\" y2=\"" << fmt2(y)
      << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << fmt2(left - 8) << "\" y=\"" << fmt2(y + 4) << "\" text-anchor=\"end\">" << fmt2(v) << "</text>\n";
  }
  // x ticks at the grid points of the first series
  if (!results.empty()) {
    for (double g : results.front().grid) {
      const double x = x_of(g);
      s << "<line x1=\"" << fmt2(x) << "\" y1=\"" << fmt2(top + ph) << "\" x2=\"" << fmt2(x) << "\" y2=\"" << fmt2(top + ph + 5)
        << "\" stroke=\"black\"/>\n";
      s << "<text x=\"" << fmt2(x) << "\" y=\"" << fmt2(top + ph + 18) << "\" text-anchor=\"middle\">"
        << format_number(g) << "</text>\n";
    }
  }
  s << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(top + ph) << "\" x2=\"" << fmt2(left + pw) << "\" y2=\""
    << fmt2(top + ph) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(top) << "\" x2=\"" << fmt2(left) << "\" y2=\"" << fmt2(top + ph)
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << fmt2(left + pw / 2) << "\" y=\"" << fmt2(height - 14) << "\" text-anchor=\"middle\">"
    << svg_escape(axis == "alpha" ? "weight scale alpha" : "rank ratio r") << "</text>\n";
  s << "<text x=\"16\" y=\"" << fmt2(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << fmt2(top + ph / 2) << ")\">averaged accuracy</text>\n";

  for (std::size_t k = 0; k < results.size(); ++k) {
    const auto& r = results[k];
    const char* color = palette[k % std::size(palette)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < r.grid.size(); ++i)
      s << (i ? " " : "") << fmt2(x_of(r.grid[i])) << "," << fmt2(y_of(r.values[i]));
    s << "\"/>\n";
    for (std::size_t i = 0; i < r.grid.size(); ++i)
      s << "<circle cx=\"" << fmt2(x_of(r.grid[i])) << "\" cy=\"" << fmt2(y_of(r.values[i])) << "\" r=\""
        << (i == r.argmax ? 5 : 3) << "\" fill=\"" << color << "\"/>\n";
    const double ly = top + 12 + 20.0 * static_cast<double>(k);
    s << "<line x1=\"" << fmt2(left + pw + 16) << "\" y1=\"" << fmt2(ly) << "\" x2=\"" << fmt2(left + pw + 40) << "\" y2=\""
      << fmt2(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << fmt2(left + pw + 46) << "\" y=\"" << fmt2(ly + 4) << "\">" << svg_escape(r.method) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace lamedit
