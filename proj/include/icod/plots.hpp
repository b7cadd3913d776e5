#pragma once

#include <functional>
#include <string>
#include <vector>

#include "icod/eval.hpp"

namespace icod {

/// 2D PCA scatter of one feature kind, points coloured by class.
/// Returns an empty string when the table has no rows of that kind.
std::string scatter_svg(const FeatureTable& table, FeatureKind kind, const std::string& title);

/// Grouped bars of per-class AP before and after incremental training.
/// Every bar carries data-class, data-series and data-ap attributes; its
/// height is ap * kBarPlotHeight.
std::string ap_bars_svg(const ForgettingReport& report, const std::string& title);

inline constexpr double kBarPlotHeight = 200.0;

struct PlotInputs {
  std::vector<std::string> forgetting_reports;  // JSON files
  std::vector<std::string> feature_tables;      // CSV files
};

/// Writes <stem>_scatter_<kind>.svg per feature kind of each table and
/// <stem>_ap_bars.svg per report. Empty inputs are skipped and reported
/// through `notice`. Returns the written paths in order.
std::vector<std::string> emit_plots(const PlotInputs& inputs, const std::string& out_dir,
                                    const std::function<void(const std::string&)>& notice = {});

struct ParsedBar {
  int class_id = 0;
  std::string series;
  double ap = 0.0;
  double height = 0.0;
};

/// Reads the bars back out of an ap_bars_svg document.
std::vector<ParsedBar> parse_ap_bars(const std::string& svg);

}  // namespace icod
