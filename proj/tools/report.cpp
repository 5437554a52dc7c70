#include "report.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <stdexcept>

namespace nac::cli {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string join_row(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += csv_field(cells[i]);
  }
  return line + "\n";
}

}  // namespace

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw std::logic_error("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                           std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out = join_row(header_);
  for (const auto& r : rows_) out += join_row(r);
  return out;
}

std::string xml_escape(std::string_view text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::size_t> histogram_counts(std::span<const double> values,
                                          std::span<const double> edges) {
  if (edges.size() < 2) throw std::invalid_argument("histogram needs at least two edges");
  const std::size_t bins = edges.size() - 1;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    if (v < edges.front() || v > edges.back()) continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t k = static_cast<std::size_t>(it - edges.begin());
    k = k == 0 ? 0 : k - 1;
    counts[std::min(k, bins - 1)]++;
  }
  return counts;
}

std::string histogram_svg(const std::string& title, const std::string& x_label,
                          std::span<const double> edges, std::span<const HistSeries> series) {
  constexpr double width = 640, height = 400;
  constexpr double left = 60, right = 20, top = 40, bottom = 60;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  const double lo = edges.front();
  const double hi = edges.back() > lo ? edges.back() : lo + 1.0;

  std::vector<std::vector<double>> fractions;
  double peak = 0.0;
  for (const auto& s : series) {
    auto counts = histogram_counts(s.values, edges);
    std::vector<double> f(counts.size(), 0.0);
    const double n = static_cast<double>(std::max<std::size_t>(s.values.size(), 1));
    for (std::size_t k = 0; k < counts.size(); ++k) {
      f[k] = static_cast<double>(counts[k]) / n;
      peak = std::max(peak, f[k]);
    }
    fractions.push_back(std::move(f));
  }
  if (peak <= 0.0) peak = 1.0;
  auto x_of = [&](double v) { return left + (v - lo) / (hi - lo) * plot_w; };
  auto y_of = [&](double f) { return top + plot_h - f / peak * plot_h; };

  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" "
      "viewBox=\"0 0 {} {}\">\n",
      width, height, width, height);
  svg += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", width,
                     height);
  svg += fmt::format(
      "<text x=\"{:.1f}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" "
      "text-anchor=\"middle\">{}</text>\n",
      width / 2, xml_escape(title));

  for (std::size_t s = 0; s < series.size(); ++s) {
    svg += fmt::format("<g fill=\"{}\" fill-opacity=\"0.5\">\n", xml_escape(series[s].color));
    for (std::size_t k = 0; k < fractions[s].size(); ++k) {
      if (fractions[s][k] <= 0.0) continue;
      const double x0 = x_of(edges[k]);
      const double x1 = x_of(edges[k + 1]);
      const double y = y_of(fractions[s][k]);
      svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\"/>\n",
                         x0, y, std::max(x1 - x0, 0.5), top + plot_h - y);
    }
    svg += "</g>\n";
  }

  svg += fmt::format(
      "<g stroke=\"black\" stroke-width=\"1\">\n"
      "<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\"/>\n"
      "<line x1=\"{0:.1f}\" y1=\"{3:.1f}\" x2=\"{0:.1f}\" y2=\"{1:.1f}\"/>\n"
      "</g>\n",
      left, top + plot_h, left + plot_w, top);
  svg += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.3g}</text>\n",
                       x_of(v), top + plot_h + 16, v);
    const double f = peak * t / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n",
                       left - 6, y_of(f) + 4, f);
  }
  svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n",
                     left + plot_w / 2, height - 20, xml_escape(x_label));
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + 14 + 16 * static_cast<double>(s);
    svg += fmt::format(
        "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"12\" height=\"12\" fill=\"{}\" "
        "fill-opacity=\"0.5\"/>\n",
        left + plot_w - 110, y - 10, xml_escape(series[s].color));
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", left + plot_w - 92, y,
                       xml_escape(series[s].name));
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

}  // namespace nac::cli
