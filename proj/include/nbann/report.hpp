#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nbann/io.hpp"
#include "nbann/metrics.hpp"

namespace nbann {

struct MeanStd {
  double mean = 0;
  std::optional<double> std;  // unbiased; absent for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  double s = 0;
  for (double x : xs) s += x;
  r.mean = s / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0;
    for (double x : xs) v += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return r;
}

inline std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string format_mean_std(const MeanStd& m) {
  return m.std ? fmt2(m.mean) + " ± " + fmt2(*m.std) : fmt2(m.mean);
}

inline constexpr const char* kMetricNames[] = {"mAP_L", "mAP_I", "Rec_L", "Prec_L", "Rec_I", "Prec_I"};

inline std::array<double, 6> metric_values(const EvalReport& r) {
  return {r.map_l, r.map_i, r.rec_l, r.prec_l, r.rec_i, r.prec_i};
}

/// One method's reports across splits.
struct ReportRow {
  std::string method;
  std::vector<EvalReport> splits;

  std::array<MeanStd, 6> aggregate() const {
    std::array<MeanStd, 6> out;
    for (std::size_t k = 0; k < 6; ++k) {
      std::vector<double> xs;
      for (const auto& r : splits) xs.push_back(metric_values(r)[k]);
      out[k] = mean_std(xs);
    }
    return out;
  }
};

inline std::string format_table(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "| Method | mAP_L | mAP_I | Rec_L | Prec_L | Rec_I | Prec_I |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    out << "| " << row.method;
    for (const auto& m : row.aggregate()) out << " | " << format_mean_std(m);
    out << " |\n";
  }
  return out.str();
}

inline std::string format_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "method";
  for (const char* m : kMetricNames) out << ',' << m << "_mean," << m << "_std";
  out << ",splits\n";
  for (const auto& row : rows) {
    out << row.method;
    for (const auto& m : row.aggregate()) out << ',' << fmt2(m.mean) << ',' << (m.std ? fmt2(*m.std) : "");
    out << ',' << row.splits.size() << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const ReportRow& row) {
  nlohmann::json j{{"method", row.method}};
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& r : row.splits) splits.push_back(to_json(r));
  j["splits"] = splits;
  const auto agg = row.aggregate();
  for (std::size_t k = 0; k < 6; ++k)
    j["aggregate"][kMetricNames[k]] = {{"mean", agg[k].mean},
                                       {"std", agg[k].std ? nlohmann::json(*agg[k].std) : nlohmann::json(nullptr)}};
  return j;
}

inline ReportRow report_row_from_json(const nlohmann::json& j) {
  ReportRow row;
  row.method = j.at("method").get<std::string>();
  for (const auto& s : j.at("splits")) row.splits.push_back(report_from_json(s));
  return row;
}

// ---------------------------------------------------------------------------
// Minimal SVG line plots; CSV stays the canonical output.

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
  bool dashed = false;
};

inline void write_svg_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                           const std::string& ylabel, const std::vector<PlotSeries>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double w = 640, h = 420, ml = 60, mr = 160, mt = 40, mb = 50;
  const auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
  const auto py = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  auto out = io::open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << xlabel << "</text>\n";
  out << "<text x=\"14\" y=\"" << (mt + h - mb) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14,"
      << (mt + h - mb) / 2 << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
    out << "<text x=\"" << px(xv) << "\" y=\"" << h - mb + 16 << "\" font-size=\"10\" text-anchor=\"middle\">"
        << fmt2(xv) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 3 << "\" font-size=\"10\" text-anchor=\"end\">" << fmt2(yv)
        << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
        << (s.dashed ? " stroke-dasharray=\"5,4\"" : "") << " points=\"";
    for (auto [x, y] : s.points) out << px(x) << ',' << py(y) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << w - mr + 8 << "\" y=\"" << mt + 14 * (i + 1) << "\" font-size=\"11\" fill=\"" << color
        << "\">" << s.name << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace nbann
