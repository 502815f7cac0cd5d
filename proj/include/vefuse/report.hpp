#pragma once

// SVG charts drawn from metric tables. Every drawn number is carried as a data-* attribute and
// comes from a CSV row, so charts can be checked against their data.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vefuse/analysis.hpp"
#include "vefuse/matrix.hpp"

namespace vefuse {

namespace svg {

inline std::string esc(std::string_view s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v, int prec = 3) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(prec) << v;
  return o.str();
}

class Doc {
 public:
  Doc(double w, double h, std::string_view title) : w_(w), h_(h) {
    o_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w, 0) << "\" height=\"" << num(h, 0)
       << "\" viewBox=\"0 0 " << num(w, 0) << ' ' << num(h, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o_ << "<title>" << esc(title) << "</title>\n";
    o_ << "<rect x=\"0\" y=\"0\" width=\"" << num(w, 0) << "\" height=\"" << num(h, 0) << "\" fill=\"white\"/>\n";
    text(w / 2, 18, title, "middle", 13);
  }

  void text(double x, double y, std::string_view s, std::string_view anchor = "start", int size = 11) {
    o_ << "<text x=\"" << num(x, 1) << "\" y=\"" << num(y, 1) << "\" text-anchor=\"" << anchor << "\" font-size=\""
       << size << "\">" << esc(s) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, std::string_view stroke = "#888") {
    o_ << "<line x1=\"" << num(x1, 1) << "\" y1=\"" << num(y1, 1) << "\" x2=\"" << num(x2, 1) << "\" y2=\"" << num(y2, 1)
       << "\" stroke=\"" << stroke << "\"/>\n";
  }
  /// `data` is a list of pre-rendered data-* attributes.
  void rect(double x, double y, double w, double h, std::string_view fill, std::string_view data = "") {
    o_ << "<rect x=\"" << num(x, 2) << "\" y=\"" << num(y, 2) << "\" width=\"" << num(w, 2) << "\" height=\""
       << num(h, 2) << "\" fill=\"" << fill << "\"" << data << "/>\n";
  }
  void circle(double cx, double cy, double r, std::string_view fill, std::string_view data = "") {
    o_ << "<circle cx=\"" << num(cx, 2) << "\" cy=\"" << num(cy, 2) << "\" r=\"" << num(r, 6) << "\" fill=\"" << fill
       << "\" fill-opacity=\"0.7\"" << data << "/>\n";
  }
  std::string str() const { return o_.str() + "</svg>\n"; }

 private:
  double w_, h_;
  std::ostringstream o_;
};

inline std::string data_attrs(const MetricRow& r, std::string_view extra = "") {
  std::ostringstream o;
  o << " data-layer=\"" << esc(r.layer) << "\" data-head=\"" << esc(r.head) << "\" data-source=\"" << esc(r.source)
    << "\" data-target=\"" << esc(r.target) << "\" data-value=\"" << format_double(r.value) << "\" data-n=\"" << r.n
    << "\"" << extra;
  return o.str();
}

inline const char* palette(std::size_t i) {
  static const char* p[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1"};
  return p[i % 7];
}

/// White to blue.
inline std::string heat(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 - 200 * v)), g = static_cast<int>(std::lround(255 - 140 * v));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, 255);
  return buf;
}

}  // namespace svg

/// Highest numeric layer label in the table, or "" if there is none.
inline std::string last_layer(const MetricTable& t) {
  int best = -1;
  for (const auto& r : t.rows) {
    if (r.layer.empty() || !std::all_of(r.layer.begin(), r.layer.end(), ::isdigit)) continue;
    best = std::max(best, std::stoi(r.layer));
  }
  return best < 0 ? "" : std::to_string(best);
}

inline std::vector<MetricRow> rows_at(const MetricTable& t, std::string_view layer, std::string_view head) {
  std::vector<MetricRow> out;
  for (const auto& r : t.rows)
    if (r.layer == layer && r.head == head) out.push_back(r);
  return out;
}

/// Head-mean CLS attention per modality, as horizontal bars.
inline std::string cls_chart_svg(const MetricTable& t, const std::string& layer) {
  const auto rows = rows_at(t, layer, "mean");
  const double bar = 22, left = 70, width = 360;
  svg::Doc d(left + width + 80, 50 + bar * rows.size() + 20, "CLS attention by modality, layer " + layer);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = 40 + bar * i;
    d.text(left - 6, y + bar * 0.65, rows[i].target, "end");
    d.rect(left, y + 2, width * rows[i].value, bar - 4, svg::palette(i), svg::data_attrs(rows[i]));
    d.text(left + width * rows[i].value + 4, y + bar * 0.65, svg::num(100.0 * rows[i].value, 1) + "%");
  }
  return d.str();
}

/// Head-mean flow matrix: rows are sources, columns targets (CLS column last).
inline std::string flow_chart_svg(const MetricTable& t, const std::string& layer) {
  const auto rows = rows_at(t, layer, "mean");
  std::vector<std::string> sources, targets;
  for (const auto& r : rows) {
    if (std::find(sources.begin(), sources.end(), r.source) == sources.end()) sources.push_back(r.source);
    if (r.target != "cls" && std::find(targets.begin(), targets.end(), r.target) == targets.end())
      targets.push_back(r.target);
  }
  targets.push_back("cls");
  const double cell = 56, left = 70, top = 60;
  svg::Doc d(left + cell * targets.size() + 20, top + cell * sources.size() + 20,
             "Attention flow between modalities (%), layer " + layer);
  for (std::size_t j = 0; j < targets.size(); ++j) d.text(left + cell * (j + 0.5), top - 8, targets[j], "middle");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    d.text(left - 6, top + cell * (i + 0.55), sources[i], "end");
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const MetricRow& r) { return r.source == sources[i] && r.target == targets[j]; });
      if (it == rows.end()) continue;
      d.rect(left + cell * j, top + cell * i, cell - 2, cell - 2, svg::heat(it->value), svg::data_attrs(*it));
      d.text(left + cell * (j + 0.5), top + cell * (i + 0.55), svg::num(100.0 * it->value, 1), "middle");
    }
  }
  return d.str();
}

/// Radius for a dot whose area is proportional to `total`.
inline double surplus_radius(double total) { return 14.0 * std::sqrt(std::max(total, 0.0)); }

/// Per-head surplus for each ordered encoder pair; dot area follows the total attention paid
/// to the target encoder.
inline std::string surplus_chart_svg(const MetricTable& surplus, const MetricTable& total, const std::string& layer) {
  std::vector<MetricRow> rows;
  std::set<std::string> heads;
  std::vector<std::string> pairs;
  for (const auto& r : surplus.rows) {
    if (r.layer != layer || r.head == "mean") continue;
    rows.push_back(r);
    heads.insert(r.head);
    const std::string p = r.source + ">" + r.target;
    if (std::find(pairs.begin(), pairs.end(), p) == pairs.end()) pairs.push_back(p);
  }
  double lim = 0.05;
  for (const auto& r : rows) lim = std::max(lim, std::abs(r.value));
  const double left = 60, top = 40, width = 60.0 * std::max<std::size_t>(heads.size(), 1) + 40, height = 240;
  svg::Doc d(left + width + 150, top + height + 50, "Surplus attention on overlapping tokens, layer " + layer);
  const double y0 = top + height / 2;
  d.line(left, y0, left + width, y0);
  d.text(left - 6, top + 8, "+" + svg::num(lim, 3), "end");
  d.text(left - 6, y0 + 4, "0", "end");
  d.text(left - 6, top + height, "-" + svg::num(lim, 3), "end");
  std::vector<std::string> head_list(heads.begin(), heads.end());
  std::sort(head_list.begin(), head_list.end(), [](const std::string& a, const std::string& b) {
    return std::stoi(a) < std::stoi(b);
  });
  for (std::size_t h = 0; h < head_list.size(); ++h) d.text(left + 40 + 60.0 * h, top + height + 20, "head " + head_list[h], "middle");
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    d.circle(left + width + 20, top + 20 * p + 6, 5, svg::palette(p));
    d.text(left + width + 30, top + 20 * p + 10, pairs[p]);
  }
  for (const auto& r : rows) {
    const auto* tot = total.find(r.layer, r.head, r.source, r.target);
    if (!tot) continue;
    const auto h = static_cast<std::size_t>(std::find(head_list.begin(), head_list.end(), r.head) - head_list.begin());
    const auto p = static_cast<std::size_t>(std::find(pairs.begin(), pairs.end(), r.source + ">" + r.target) - pairs.begin());
    const double x = left + 40 + 60.0 * h + 8.0 * (static_cast<double>(p) - (pairs.size() - 1) / 2.0);
    const double y = y0 - (r.value / lim) * (height / 2);
    d.circle(x, y, surplus_radius(tot->value), svg::palette(p),
             svg::data_attrs(r, " data-total=\"" + format_double(tot->value) + "\""));
  }
  return d.str();
}

/// Layer x head accuracy heatmap, one panel per encoder.
inline std::string grounding_chart_svg(const MetricTable& t) {
  std::vector<std::string> ves, layers;
  std::size_t heads = 0;
  for (const auto& r : t.rows) {
    if (r.head == "mean") continue;
    if (std::find(ves.begin(), ves.end(), r.target) == ves.end()) ves.push_back(r.target);
    if (std::find(layers.begin(), layers.end(), r.layer) == layers.end()) layers.push_back(r.layer);
    heads = std::max(heads, static_cast<std::size_t>(std::stoi(r.head)) + 1);
  }
  const double cell = 36, left = 60, top = 60, panel = cell * heads + 50;
  svg::Doc d(left + panel * ves.size() + 10, top + cell * layers.size() + 40, "Grounding accuracy per head");
  for (std::size_t v = 0; v < ves.size(); ++v) {
    const double x0 = left + panel * v;
    d.text(x0 + cell * heads / 2, top - 22, ves[v], "middle", 12);
    for (std::size_t h = 0; h < heads; ++h) d.text(x0 + cell * (h + 0.5), top - 6, std::to_string(h), "middle");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (v == 0) d.text(left - 6, top + cell * (l + 0.6), "layer " + layers[l], "end");
      for (std::size_t h = 0; h < heads; ++h) {
        const auto* r = t.find(layers[l], std::to_string(h), "text", ves[v]);
        if (!r) continue;
        d.rect(x0 + cell * h, top + cell * l, cell - 2, cell - 2, svg::heat(r->value), svg::data_attrs(*r));
        d.text(x0 + cell * (h + 0.5), top + cell * (l + 0.6), svg::num(100.0 * r->value, 0), "middle", 10);
      }
    }
  }
  return d.str();
}

/// Relative decrease after dropping each encoder.
inline std::string drop_chart_svg(const MetricTable& t) {
  const double bar = 26, left = 130, width = 320;
  double lim = 0.05;
  for (const auto& r : t.rows) lim = std::max(lim, std::abs(r.value));
  svg::Doc d(left + width + 90, 50 + bar * t.rows.size() + 20, "Relative decrease after dropping an encoder");
  const double zero = left + width / 2;
  d.line(zero, 34, zero, 40 + bar * t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    const double y = 40 + bar * i, w = (width / 2) * r.value / lim;
    d.text(left - 6, y + bar * 0.65, "drop " + r.source + " (" + r.target + ")", "end");
    d.rect(w >= 0 ? zero : zero + w, y + 3, std::abs(w), bar - 6, svg::palette(i), svg::data_attrs(r));
    d.text(zero + std::max(w, 0.0) + 4, y + bar * 0.65, svg::num(100.0 * r.value, 1) + "%");
  }
  return d.str();
}

/// Mean accuracy per combination with a +-std whisker.
inline std::string results_chart_svg(const std::vector<MatrixRow>& rows) {
  const double bar = 40, top = 40, height = 220, left = 50;
  svg::Doc d(left + bar * rows.size() + 30, top + height + 70, "Test accuracy by encoder combination");
  d.line(left, top + height, left + bar * rows.size(), top + height);
  for (double v : {0.0, 0.5, 1.0}) d.text(left - 6, top + height * (1 - v) + 4, svg::num(v, 1), "end");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (!r.ok) continue;
    const double h = height * r.accuracy.mean, x = left + bar * i + 6;
    d.rect(x, top + height - h, bar - 12, h, svg::palette(r.ves.size() - 1),
           " data-combo=\"" + combo_name(r.ves) + "\" data-value=\"" + format_double(r.accuracy.mean) +
               "\" data-std=\"" + format_double(r.accuracy.std) + "\"");
    const double s = height * r.accuracy.std, cx = x + (bar - 12) / 2;
    d.line(cx, top + height - h - s, cx, top + height - h + s, "#333");
    d.text(cx, top + height + 14, combo_name(r.ves), "middle", 9);
  }
  return d.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
}

/// Draws every chart whose CSV exists in `dir`. Returns the SVG files written.
inline std::vector<std::filesystem::path> render_charts(const std::filesystem::path& dir, const std::string& layer_pref = "") {
  std::vector<std::filesystem::path> out;
  auto have = [&](const char* f) { return std::filesystem::exists(dir / f); };
  auto pick = [&](const MetricTable& t) { return layer_pref.empty() ? last_layer(t) : layer_pref; };
  if (have("cls_attention.csv")) {
    const auto t = read_metric_csv(dir / "cls_attention.csv");
    write_text(dir / "cls_attention.svg", cls_chart_svg(t, pick(t)));
    out.push_back(dir / "cls_attention.svg");
  }
  if (have("modality_flow.csv")) {
    const auto t = read_metric_csv(dir / "modality_flow.csv");
    write_text(dir / "modality_flow.svg", flow_chart_svg(t, pick(t)));
    out.push_back(dir / "modality_flow.svg");
  }
  if (have("surplus_attention.csv") && have("surplus_total.csv")) {
    const auto s = read_metric_csv(dir / "surplus_attention.csv");
    const auto t = read_metric_csv(dir / "surplus_total.csv");
    write_text(dir / "surplus_attention.svg", surplus_chart_svg(s, t, pick(s)));
    out.push_back(dir / "surplus_attention.svg");
  }
  if (have("grounding_accuracy.csv")) {
    write_text(dir / "grounding_accuracy.svg", grounding_chart_svg(read_metric_csv(dir / "grounding_accuracy.csv")));
    out.push_back(dir / "grounding_accuracy.svg");
  }
  if (have("drop_ve.csv")) {
    write_text(dir / "drop_ve.svg", drop_chart_svg(read_metric_csv(dir / "drop_ve.csv")));
    out.push_back(dir / "drop_ve.svg");
  }
  return out;
}

}  // namespace vefuse
