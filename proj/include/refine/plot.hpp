#pragma once

// Minimal raster plots written as PNG (no text rendering).

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace refine {

using Rgb = std::array<std::uint8_t, 3>;

struct Series {
  std::vector<double> x;
  std::vector<double> y;
  Rgb color{0, 0, 0};
};

/// Line chart over the union of the series' ranges; log_y plots log10(y) for y > 0.
void plot_lines(const std::filesystem::path& path, const std::vector<Series>& series, bool log_y = true,
                int width = 640, int height = 400);

/// Vertical bars, one per value, baseline at the minimum of 0 and the values.
void plot_bars(const std::filesystem::path& path, const std::vector<double>& values, const std::vector<Rgb>& colors,
               int width = 480, int height = 320);

/// Trailing moving average.
std::vector<double> smooth(const std::vector<double>& y, int window);

}  // namespace refine
