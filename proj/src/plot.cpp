#include "refine/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "refine/errors.hpp"
#include "refine/image_io.hpp"

namespace refine {

namespace {

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> px;

  Canvas(int width, int height) : w(width), h(height), px(static_cast<size_t>(width * height * 3), 255) {}

  void set(int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::copy(c.begin(), c.end(), px.begin() + (static_cast<std::ptrdiff_t>(y) * w + x) * 3);
  }

  void line(int x0, int y0, int x1, int y1, const Rgb& c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void rect(int x0, int y0, int x1, int y1, const Rgb& c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }

  void save(const std::filesystem::path& path) const { write_png(path, RawImage{w, h, 3, px}); }
};

constexpr int kMargin = 20;
const Rgb kAxis{60, 60, 60};

}  // namespace

std::vector<double> smooth(const std::vector<double>& y, int window) {
  std::vector<double> out(y.size());
  double sum = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    sum += y[i];
    if (i >= static_cast<size_t>(window)) sum -= y[i - static_cast<size_t>(window)];
    out[i] = sum / static_cast<double>(std::min(i + 1, static_cast<size_t>(window)));
  }
  return out;
}

void plot_lines(const std::filesystem::path& path, const std::vector<Series>& series, bool log_y, int width,
                int height) {
  require(width > 2 * kMargin && height > 2 * kMargin, ErrorKind::ShapeMismatch, "plot too small");
  auto ty = [log_y](double v) { return log_y ? (v > 0 ? std::log10(v) : std::numeric_limits<double>::quiet_NaN()) : v; };
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double y = ty(s.y[i]);
      if (!std::isfinite(y) || !std::isfinite(s.x[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  Canvas c(width, height);
  c.line(kMargin, height - kMargin, width - kMargin, height - kMargin, kAxis);
  c.line(kMargin, kMargin, kMargin, height - kMargin, kAxis);
  if (std::isfinite(xmin) && std::isfinite(ymin)) {
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double sx = (width - 2 * kMargin) / (xmax - xmin);
    const double sy = (height - 2 * kMargin) / (ymax - ymin);
    for (const auto& s : series) {
      bool have = false;
      int px = 0, py = 0;
      for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
        const double y = ty(s.y[i]);
        if (!std::isfinite(y)) {
          have = false;
          continue;
        }
        const int x1 = kMargin + static_cast<int>(std::lround((s.x[i] - xmin) * sx));
        const int y1 = height - kMargin - static_cast<int>(std::lround((y - ymin) * sy));
        if (have) c.line(px, py, x1, y1, s.color);
        px = x1;
        py = y1;
        have = true;
      }
    }
  }
  c.save(path);
}

void plot_bars(const std::filesystem::path& path, const std::vector<double>& values, const std::vector<Rgb>& colors,
               int width, int height) {
  require(!values.empty(), ErrorKind::ShapeMismatch, "no bars to plot");
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) hi = lo + 1;
  Canvas c(width, height);
  const double scale = (height - 2 * kMargin) / (hi - lo);
  const int base = height - kMargin - static_cast<int>(std::lround(-lo * scale));
  const int slot = (width - 2 * kMargin) / static_cast<int>(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const int x0 = kMargin + static_cast<int>(i) * slot + slot / 6;
    const int x1 = kMargin + static_cast<int>(i + 1) * slot - slot / 6;
    const int top = base - static_cast<int>(std::lround(values[i] * scale));
    c.rect(x0, base, x1, top, colors.empty() ? Rgb{70, 110, 200} : colors[i % colors.size()]);
  }
  c.line(kMargin, base, width - kMargin, base, kAxis);
  c.save(path);
}

}  // namespace refine
