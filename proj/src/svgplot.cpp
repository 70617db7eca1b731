#include "clface/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "clface/errors.hpp"

namespace clface {

namespace {
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}
}  // namespace

void write_svg_line_chart(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  const double W = 720, H = 480;
  const double ml = 70, mr = 170, mt = 50, mb = 55;  // margins; legend on the right
  const double pw = W - ml - mr, ph = H - mt - mb;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!any) {
        xmin = xmax = x;
        ymin = ymax = y;
        any = true;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  const double ypad = std::max(0.02, (ymax - ymin) * 0.08);
  ymin -= ypad;
  ymax += ypad;

  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvalError("cannot write plot: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"28\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"17\">" << title << "</text>\n";

  // Axes, grid, tick labels.
  out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
      << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#333\"/>\n";
  const int ticks = 5;
  for (int i = 0; i <= ticks; ++i) {
    const double fx = xmin + (xmax - xmin) * i / ticks;
    const double fy = ymin + (ymax - ymin) * i / ticks;
    out << "<line x1=\"" << sx(fx) << "\" y1=\"" << mt + ph << "\" x2=\""
        << sx(fx) << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"#333\"/>\n"
        << "<text x=\"" << sx(fx) << "\" y=\"" << mt + ph + 20
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">" << fmt(fx) << "</text>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << sy(fy) << "\" x2=\"" << ml + pw
        << "\" y2=\"" << sy(fy)
        << "\" stroke=\"#ddd\" stroke-dasharray=\"3,3\"/>\n"
        << "<text x=\"" << ml - 8 << "\" y=\"" << sy(fy) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << fmt(fy) << "</text>\n";
  }
  out << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 14
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << x_label << "</text>\n"
      << "<text x=\"18\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
         "transform=\"rotate(-90 18 " << mt + ph / 2 << ")\">" << y_label
      << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : series[si].points) {
      out << sx(x) << "," << sy(y) << " ";
    }
    out << "\"/>\n";
    for (const auto& [x, y] : series[si].points) {
      out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y)
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = mt + 14 + 20 * static_cast<double>(si);
    out << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly << "\" x2=\""
        << ml + pw + 36 << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << ml + pw + 42 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[si].label
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace clface
