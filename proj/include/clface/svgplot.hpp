#pragma once

#include <string>
#include <utility>
#include <vector>

namespace clface {

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Minimal static line chart (SVG). Good enough for accuracy-vs-step curves;
/// no external dependencies.
void write_svg_line_chart(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);

}  // namespace clface
