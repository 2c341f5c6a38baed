#pragma once

// Deterministic standalone SVG charts: regret lines with quantile bands,
// grouped detail bars, and PCA scatter plots. No timestamps, fixed series
// ordering and palette, so output files are byte-stable across runs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/csv.hpp"
#include "coinlab/errors.hpp"

namespace coinlab {

struct ChartSeries {
  std::string label;
  std::vector<double> y;
  std::vector<double> lo, hi;  // optional band, same length as y when present
};

struct BarSeries {
  std::string label;
  std::vector<double> values;  // one per group
  std::vector<double> lo, hi;  // optional whiskers
};

struct ScatterSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct RenderOutcome {
  bool written = false;
  std::vector<std::string> warnings;
};

namespace detail {

inline const char* chart_color(size_t i) {
  static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
                                   "#335577", "#aa3377", "#44aa77", "#775544"};
  return kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))];
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Scale {
  double lo = 0.0, hi = 1.0, px0 = 0.0, px1 = 1.0;
  double operator()(double v) const { return px0 + (v - lo) / (hi - lo) * (px1 - px0); }
};

inline void pad_domain(double& lo, double& hi) {
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  } else {
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
}

inline std::vector<double> nice_ticks(double lo, double hi, int want = 5) {
  const double span = hi - lo;
  const double raw = span / want;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-12 * span; t += step)
    ticks.push_back(std::abs(t) < 1e-12 * span ? 0.0 : t);
  return ticks;
}

class SvgDoc {
 public:
  SvgDoc(double w, double h) : w_(w), h_(h) {
    body_ += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num_str(w) +
             "\" height=\"" + num_str(h) + "\" viewBox=\"0 0 " + num_str(w) + " " + num_str(h) +
             "\" font-family=\"Helvetica,Arial,sans-serif\">\n";
    body_ += "<rect width=\"" + num_str(w) + "\" height=\"" + num_str(h) + "\" fill=\"#ffffff\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    body_ += "<line x1=\"" + num_str(x1) + "\" y1=\"" + num_str(y1) + "\" x2=\"" + num_str(x2) +
             "\" y2=\"" + num_str(y2) + "\" stroke=\"" + stroke + "\" stroke-width=\"" +
             num_str(width) + "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) body_ += num_str(x) + "," + num_str(y) + " ";
    body_ += "\"/>\n";
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill) {
    body_ += "<polygon fill=\"" + fill + "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
    for (const auto& [x, y] : pts) body_ += num_str(x) + "," + num_str(y) + " ";
    body_ += "\"/>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ += "<rect x=\"" + num_str(x) + "\" y=\"" + num_str(y) + "\" width=\"" + num_str(w) +
             "\" height=\"" + num_str(h) + "\" fill=\"" + fill + "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    body_ += "<circle cx=\"" + num_str(x) + "\" cy=\"" + num_str(y) + "\" r=\"" + num_str(r) +
             "\" fill=\"" + fill + "\" fill-opacity=\"0.6\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start", const std::string& fill = "#222222") {
    body_ += "<text x=\"" + num_str(x) + "\" y=\"" + num_str(y) + "\" font-size=\"" +
             std::to_string(size) + "\" text-anchor=\"" + anchor + "\" fill=\"" + fill + "\">" +
             escape(s) + "</text>\n";
  }

  void save(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InvalidConfig("cannot write chart: " + path);
    out << body_ << "</svg>\n";
  }

  double width() const { return w_; }
  double height() const { return h_; }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '&')
        out += "&amp;";
      else if (c == '<')
        out += "&lt;";
      else if (c == '>')
        out += "&gt;";
      else
        out += c;
    }
    return out;
  }
  double w_, h_;
  std::string body_;
};

// ys runs bottom to top in pixels: ys.px0 is the chart floor.
inline void draw_axes(SvgDoc& doc, const Scale& xs, const Scale& ys, const std::string& x_label,
                      const std::string& y_label, bool x_ticks = true) {
  doc.line(xs.px0, ys.px0, xs.px1, ys.px0, "#333333");
  doc.line(xs.px0, ys.px0, xs.px0, ys.px1, "#333333");
  if (x_ticks)
    for (double t : nice_ticks(xs.lo, xs.hi)) {
      doc.line(xs(t), ys.px0, xs(t), ys.px0 + 4, "#333333");
      doc.text(xs(t), ys.px0 + 18, tick_label(t), 11, "middle");
    }
  for (double t : nice_ticks(ys.lo, ys.hi)) {
    doc.line(xs.px0 - 4, ys(t), xs.px0, ys(t), "#333333");
    doc.text(xs.px0 - 8, ys(t) + 4, tick_label(t), 11, "end");
    doc.line(xs.px0, ys(t), xs.px1, ys(t), "#eeeeee");
  }
  doc.text((xs.px0 + xs.px1) / 2, doc.height() - 8, x_label, 12, "middle");
  doc.text(14, ys.px0 - 10, y_label, 12, "start");
}

}  // namespace detail

inline RenderOutcome render_line_chart(const std::string& path, const std::string& title,
                                       const std::string& x_label, const std::string& y_label,
                                       const std::vector<ChartSeries>& series) {
  RenderOutcome out;
  std::vector<const ChartSeries*> usable;
  for (const auto& s : series) {
    if (s.y.empty())
      out.warnings.push_back("series '" + s.label + "' has no data; gap left in chart");
    else
      usable.push_back(&s);
  }
  if (usable.empty()) {
    out.warnings.push_back("no series to draw for '" + title + "'; chart not written");
    return out;
  }

  double ylo = usable[0]->y[0], yhi = ylo;
  size_t xmax = 0;
  for (const auto* s : usable) {
    xmax = std::max(xmax, s->y.size());
    for (double v : s->y) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
    for (double v : s->lo) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
    for (double v : s->hi) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
  }
  detail::pad_domain(ylo, yhi);

  detail::SvgDoc doc(860, 520);
  detail::Scale xs{0.0, static_cast<double>(xmax - 1), 70, 660};
  detail::Scale ys{ylo, yhi, 470, 46};
  detail::draw_axes(doc, xs, ys, x_label, y_label);
  doc.text(70, 24, title, 15);

  for (size_t i = 0; i < usable.size(); ++i) {
    const auto& s = *usable[i];
    const std::string color = detail::chart_color(i);
    if (s.lo.size() == s.y.size() && s.hi.size() == s.y.size() && !s.lo.empty()) {
      std::vector<std::pair<double, double>> band;
      for (size_t t = 0; t < s.y.size(); ++t)
        band.push_back({xs(double(t)), ys(s.lo[t])});
      for (size_t t = s.y.size(); t-- > 0;) band.push_back({xs(double(t)), ys(s.hi[t])});
      doc.polygon(band, color);
    }
    std::vector<std::pair<double, double>> pts;
    for (size_t t = 0; t < s.y.size(); ++t) pts.push_back({xs(double(t)), ys(s.y[t])});
    doc.polyline(pts, color);
    doc.rect(672, 46.0 + 18.0 * double(i), 12, 4, color);
    doc.text(690, 53.0 + 18.0 * double(i), s.label, 11);
  }
  doc.save(path);
  out.written = true;
  return out;
}

inline RenderOutcome render_bar_chart(const std::string& path, const std::string& title,
                                      const std::string& y_label,
                                      const std::vector<std::string>& groups,
                                      const std::vector<BarSeries>& series) {
  RenderOutcome out;
  std::vector<const BarSeries*> usable;
  for (const auto& s : series) {
    if (s.values.size() != groups.size())
      out.warnings.push_back("series '" + s.label + "' missing group values; gap left");
    else
      usable.push_back(&s);
  }
  if (usable.empty() || groups.empty()) {
    out.warnings.push_back("no bars to draw for '" + title + "'; chart not written");
    return out;
  }

  double yhi = 0.0, ylo = 0.0;
  for (const auto* s : usable) {
    for (double v : s->values) yhi = std::max(yhi, v), ylo = std::min(ylo, v);
    for (double v : s->hi) yhi = std::max(yhi, v);
    for (double v : s->lo) ylo = std::min(ylo, v);
  }
  detail::pad_domain(ylo, yhi);
  ylo = std::min(ylo, 0.0);

  detail::SvgDoc doc(860, 520);
  detail::Scale ys{ylo, yhi, 470, 46};
  const double x0 = 70, x1 = 660;
  const double group_w = (x1 - x0) / double(groups.size());
  const double bar_w = group_w * 0.8 / double(usable.size());

  detail::Scale xs{0.0, 1.0, x0, x1};
  detail::draw_axes(doc, xs, ys, "", y_label, false);
  doc.text(70, 24, title, 15);

  for (size_t g = 0; g < groups.size(); ++g) {
    const double gx = x0 + group_w * (double(g) + 0.5);
    doc.text(gx, 488, groups[g], 12, "middle");
    for (size_t i = 0; i < usable.size(); ++i) {
      const double v = usable[i]->values[g];
      const double bx = gx - group_w * 0.4 + bar_w * double(i);
      const double top = ys(std::max(v, 0.0));
      const double bottom = ys(std::min(v, 0.0));
      doc.rect(bx, top, bar_w * 0.9, bottom - top, detail::chart_color(i));
      if (usable[i]->lo.size() == groups.size() && usable[i]->hi.size() == groups.size()) {
        const double cx = bx + bar_w * 0.45;
        doc.line(cx, ys(usable[i]->lo[g]), cx, ys(usable[i]->hi[g]), "#333333");
      }
    }
  }
  for (size_t i = 0; i < usable.size(); ++i) {
    doc.rect(672, 46.0 + 18.0 * double(i), 12, 8, detail::chart_color(i));
    doc.text(690, 54.0 + 18.0 * double(i), usable[i]->label, 11);
  }
  doc.save(path);
  out.written = true;
  return out;
}

inline RenderOutcome render_scatter(const std::string& path, const std::string& title,
                                    const std::string& x_label, const std::string& y_label,
                                    const std::vector<ScatterSeries>& series) {
  RenderOutcome out;
  std::vector<const ScatterSeries*> usable;
  for (const auto& s : series) {
    if (s.points.empty())
      out.warnings.push_back("series '" + s.label + "' has no points; gap left");
    else
      usable.push_back(&s);
  }
  if (usable.empty()) {
    out.warnings.push_back("no points to draw for '" + title + "'; chart not written");
    return out;
  }
  double xlo = usable[0]->points[0].first, xhi = xlo;
  double ylo = usable[0]->points[0].second, yhi = ylo;
  for (const auto* s : usable)
    for (const auto& [x, y] : s->points) {
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  detail::pad_domain(xlo, xhi);
  detail::pad_domain(ylo, yhi);

  detail::SvgDoc doc(860, 520);
  detail::Scale xs{xlo, xhi, 70, 660};
  detail::Scale ys{ylo, yhi, 470, 46};
  detail::draw_axes(doc, xs, ys, x_label, y_label);
  doc.text(70, 24, title, 15);
  for (size_t i = 0; i < usable.size(); ++i) {
    const std::string color = usable[i]->label == "pretrain" ? "#999999" : detail::chart_color(i);
    for (const auto& [x, y] : usable[i]->points) doc.circle(xs(x), ys(y), 2.0, color);
    doc.rect(672, 46.0 + 18.0 * double(i), 12, 8, color);
    doc.text(690, 54.0 + 18.0 * double(i), usable[i]->label, 11);
  }
  doc.save(path);
  out.written = true;
  return out;
}

}  // namespace coinlab
