#pragma once
// CSV tables and static SVG histograms written by the commands.
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nac::cli {

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);
  void add(std::vector<std::string> cells);
  std::size_t rows() const { return rows_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

std::string xml_escape(std::string_view text);

struct HistSeries {
  std::string name;
  std::string color;
  std::vector<double> values;
};

// Bin counts of `values` over ascending `edges` (last bin closed).
std::vector<std::size_t> histogram_counts(std::span<const double> values,
                                          std::span<const double> edges);

// Overlaid bar histograms, each series normalized to fractions of its size.
std::string histogram_svg(const std::string& title, const std::string& x_label,
                          std::span<const double> edges, std::span<const HistSeries> series);

}  // namespace nac::cli
