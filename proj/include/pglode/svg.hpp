#pragma once

// Minimal SVG emitters for the evaluation bar chart and case-study plot.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

namespace pglode::svg {

inline std::string escape(const std::string& s) {
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

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> colors = {"#7f7f7f", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  return colors;
}

struct BarGroup {
  std::string label;            // e.g. "TILE-POD"
  std::vector<double> values;   // one per series; negative = undefined (not drawn)
};

/// Grouped bar chart with values in [0, 1].
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& series,
                             const std::vector<BarGroup>& groups) {
  const double width = 640, height = 360, left = 50, bottom = 300, top = 40, plot_h = bottom - top;
  const double group_w = (width - left - 20) / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) + "\">\n";
  s += "<text x=\"" + num(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + escape(title) + "</text>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(width - 10) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    const double y = bottom - v * plot_h;
    s += "<text x=\"" + num(left - 6) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\" font-size=\"10\">" + num(v) +
         "</text>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + static_cast<double>(g) * group_w + group_w * 0.1;
    for (std::size_t k = 0; k < groups[g].values.size() && k < series.size(); ++k) {
      const double v = groups[g].values[k];
      if (v < 0) continue;
      const double bh = std::clamp(v, 0.0, 1.0) * plot_h;
      s += "<rect x=\"" + num(gx + static_cast<double>(k) * bar_w) + "\" y=\"" + num(bottom - bh) + "\" width=\"" +
           num(bar_w * 0.95) + "\" height=\"" + num(bh) + "\" fill=\"" + palette()[k % palette().size()] + "\"/>\n";
    }
    s += "<text x=\"" + num(gx + group_w * 0.4) + "\" y=\"" + num(bottom + 16) +
         "\" text-anchor=\"middle\" font-size=\"12\">" + escape(groups[g].label) + "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double y = height - 30 + 0.0 * k;
    const double x = left + static_cast<double>(k) * 150;
    s += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"12\" height=\"12\" fill=\"" +
         palette()[k % palette().size()] + "\"/>\n";
    s += "<text x=\"" + num(x + 16) + "\" y=\"" + num(y + 11) + "\" font-size=\"12\">" + escape(series[k]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

struct Line {
  std::string label;
  std::vector<double> values;
};

/// Line plot over integer x positions (one point per value).
inline std::string line_plot(const std::string& title, const std::vector<int>& xs, const std::vector<Line>& lines,
                             const std::string& y_label) {
  const double width = 640, height = 360, left = 60, right = 20, top = 40, bottom = 290;
  double ymax = 1e-9;
  for (const auto& l : lines)
    for (double v : l.values) ymax = std::max(ymax, v);
  ymax *= 1.1;
  const double span = xs.size() > 1 ? static_cast<double>(xs.size() - 1) : 1.0;
  auto px = [&](std::size_t i) { return left + (width - left - right) * static_cast<double>(i) / span; };
  auto py = [&](double v) { return bottom - (bottom - top) * v / ymax; };
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) + "\">\n";
  s += "<text x=\"" + num(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + escape(title) + "</text>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(width - right) + "\" y2=\"" +
       num(bottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  s += "<text x=\"14\" y=\"" + num((top + bottom) / 2) + "\" font-size=\"12\" transform=\"rotate(-90 14 " +
       num((top + bottom) / 2) + ")\">" + escape(y_label) + "</text>\n";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s += "<text x=\"" + num(px(i)) + "\" y=\"" + num(bottom + 14) + "\" text-anchor=\"middle\" font-size=\"10\">" +
         std::to_string(xs[i]) + "</text>\n";
  }
  for (std::size_t k = 0; k < lines.size(); ++k) {
    const auto& color = palette()[k % palette().size()];
    std::string pts;
    for (std::size_t i = 0; i < lines[k].values.size(); ++i) {
      pts += num(px(i)) + "," + num(py(lines[k].values[i])) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = height - 40 + 0.0 * k;
    const double lx = left + static_cast<double>(k) * 140;
    s += "<rect x=\"" + num(lx) + "\" y=\"" + num(ly) + "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + num(lx + 16) + "\" y=\"" + num(ly + 11) + "\" font-size=\"12\">" + escape(lines[k].label) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace pglode::svg
