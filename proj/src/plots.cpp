#include "icod/plots.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <set>

#include "icod/errors.hpp"

namespace icod {

namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, 12> kClassColors = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                                      "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                                      "#bcbd22", "#17becf", "#393b79", "#637939"};

const char* class_color(int c) { return kClassColors[static_cast<std::size_t>(c) % kClassColors.size()]; }

std::string fx(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string header(double w, double h, const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fx(w) + "\" height=\"" + fx(h) +
         "\" viewBox=\"0 0 " + fx(w) + " " + fx(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" +
         "<text x=\"" + fx(w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         escape(title) + "</text>\n";
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

std::string scatter_svg(const FeatureTable& table, FeatureKind kind, const std::string& title) {
  const auto points = pca_2d(table, kind);
  if (points.empty()) return {};
  constexpr double W = 480, H = 480, M = 40;
  double x0 = points[0].x, x1 = x0, y0 = points[0].y, y1 = y0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  auto map = [](double v, double lo, double hi, double a, double b) {
    return hi > lo ? a + (v - lo) / (hi - lo) * (b - a) : (a + b) / 2;
  };

  std::string svg = header(W, H, title);
  svg += "<rect x=\"" + fx(M) + "\" y=\"" + fx(M) + "\" width=\"" + fx(W - 2 * M) + "\" height=\"" + fx(H - 2 * M) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (const auto& p : points) {
    svg += "<circle class=\"point\" data-class=\"" + std::to_string(p.class_id) + "\" cx=\"" +
           fx(map(p.x, x0, x1, M + 6, W - M - 6)) + "\" cy=\"" + fx(map(p.y, y0, y1, H - M - 6, M + 6)) +
           "\" r=\"3\" fill=\"" + class_color(p.class_id) + "\" fill-opacity=\"0.75\"/>\n";
  }
  std::set<int> classes;
  for (const auto& p : points) classes.insert(p.class_id);
  double ly = M + 12;
  for (int c : classes) {
    svg += "<rect x=\"" + fx(W - M + 6) + "\" y=\"" + fx(ly - 8) + "\" width=\"8\" height=\"8\" fill=\"" +
           class_color(c) + "\"/><text x=\"" + fx(W - M + 17) + "\" y=\"" + fx(ly) +
           "\" font-family=\"sans-serif\" font-size=\"10\">" + std::to_string(c) + "</text>\n";
    ly += 14;
  }
  svg += "<text x=\"" + fx(W / 2) + "\" y=\"" + fx(H - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">PC1</text>\n";
  svg += "<text x=\"14\" y=\"" + fx(H / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
         "transform=\"rotate(-90 14 " + fx(H / 2) + ")\">PC2</text>\n</svg>\n";
  return svg;
}

std::string ap_bars_svg(const ForgettingReport& report, const std::string& title) {
  if (report.rows.empty()) return {};
  constexpr double M = 40, group = 40, bar = 14;
  const double W = 2 * M + group * static_cast<double>(report.rows.size()) + 90;
  const double base = M + kBarPlotHeight;
  const double H = base + 40;

  std::string svg = header(W, H, title);
  svg += "<line x1=\"" + fx(M) + "\" y1=\"" + fx(base) + "\" x2=\"" + fx(W - M - 90) + "\" y2=\"" + fx(base) +
         "\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = base - kBarPlotHeight * t / 4.0;
    svg += "<text x=\"" + fx(M - 4) + "\" y=\"" + fx(y + 3) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"9\">" + fx(t / 4.0).substr(0, 4) +
           "</text>\n";
  }
  auto emit_bar = [&](int c, const char* series, double ap, double x, const char* color) {
    const double h = ap * kBarPlotHeight;
    svg += "<rect class=\"bar\" data-class=\"" + std::to_string(c) + "\" data-series=\"" + series +
           "\" data-ap=\"" + num(ap) + "\" x=\"" + fx(x) + "\" y=\"" + fx(base - h) + "\" width=\"" + fx(bar) +
           "\" height=\"" + num(h) + "\" fill=\"" + color + "\"/>\n";
  };
  double x = M + 6;
  for (const auto& r : report.rows) {
    if (r.before) emit_bar(r.class_id, "before", *r.before, x, "#9ecae1");
    emit_bar(r.class_id, "after", r.after, x + bar, "#08519c");
    svg += "<text x=\"" + fx(x + bar) + "\" y=\"" + fx(base + 14) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" + std::to_string(r.class_id) +
           (r.status == "new" ? "*" : "") + "</text>\n";
    x += group;
  }
  const double lx = W - M - 80;
  svg += "<rect x=\"" + fx(lx) + "\" y=\"" + fx(M) + "\" width=\"8\" height=\"8\" fill=\"#9ecae1\"/><text x=\"" +
         fx(lx + 12) + "\" y=\"" + fx(M + 8) + "\" font-family=\"sans-serif\" font-size=\"10\">before</text>\n";
  svg += "<rect x=\"" + fx(lx) + "\" y=\"" + fx(M + 14) + "\" width=\"8\" height=\"8\" fill=\"#08519c\"/><text x=\"" +
         fx(lx + 12) + "\" y=\"" + fx(M + 22) + "\" font-family=\"sans-serif\" font-size=\"10\">after</text>\n";
  svg += "<text x=\"" + fx(M) + "\" y=\"" + fx(H - 8) +
         "\" font-family=\"sans-serif\" font-size=\"9\">* new class</text>\n</svg>\n";
  return svg;
}

std::vector<std::string> emit_plots(const PlotInputs& inputs, const std::string& out_dir,
                                    const std::function<void(const std::string&)>& notice) {
  auto say = [&](const std::string& msg) {
    if (notice) notice(msg);
  };
  // Parse everything first so that a bad input leaves no partial output.
  std::vector<std::pair<std::string, FeatureTable>> tables;
  for (const auto& path : inputs.feature_tables)
    tables.emplace_back(fs::path(path).stem().string(), feature_table_from_csv(read_text(path)));
  std::vector<std::pair<std::string, ForgettingReport>> reports;
  for (const auto& path : inputs.forgetting_reports) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("'" + path + "' is not valid JSON: " + e.what());
    }
    reports.emplace_back(fs::path(path).stem().string(), forgetting_report_from_json(j));
  }

  std::vector<std::pair<fs::path, std::string>> files;
  for (const auto& [stem, table] : tables) {
    if (table.rows.empty()) {
      say("feature table " + stem + " is empty; skipped");
      continue;
    }
    for (auto kind : {FeatureKind::F, FeatureKind::Fc, FeatureKind::Fb}) {
      const std::string svg = scatter_svg(table, kind, stem + ": " + to_string(kind));
      if (!svg.empty()) files.emplace_back(fs::path(out_dir) / (stem + "_scatter_" + to_string(kind) + ".svg"), svg);
    }
  }
  for (const auto& [stem, report] : reports) {
    if (report.rows.empty()) {
      say("report " + stem + " has no rows; skipped");
      continue;
    }
    files.emplace_back(fs::path(out_dir) / (stem + "_ap_bars.svg"), ap_bars_svg(report, stem + ": per-class AP"));
  }

  std::vector<std::string> written;
  if (!files.empty()) fs::create_directories(out_dir);
  for (const auto& [path, svg] : files) {
    write_text(path, svg);
    written.push_back(path.string());
  }
  return written;
}

std::vector<ParsedBar> parse_ap_bars(const std::string& svg) {
  static const std::regex bar_re(
      "<rect class=\"bar\" data-class=\"(-?\\d+)\" data-series=\"(\\w+)\" data-ap=\"([^\"]+)\"[^>]*height=\"([^\"]+)\"");
  std::vector<ParsedBar> bars;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar_re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    bars.push_back({std::stoi(m[1]), m[2], std::stod(m[3]), std::stod(m[4])});
  }
  return bars;
}

}  // namespace icod
