#include "concordia/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace concordia::svg {

namespace {

constexpr int kWidth = 640, kHeight = 480;
constexpr int kMarginL = 64, kMarginR = 20, kMarginT = 40, kMarginB = 48;

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), format, a, b, c, d);
    return buf;
}

} // namespace

void write_plot(const std::filesystem::path& path, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::vector<Series>& series) {
    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    bool first = true;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (first) {
                x_min = x_max = x;
                y_min = y_max = y;
                first = false;
            }
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
    if (x_max - x_min < 1e-12) x_max = x_min + 1.0;
    if (y_max - y_min < 1e-12) y_max = y_min + 1.0;

    const double px_w = kWidth - kMarginL - kMarginR;
    const double px_h = kHeight - kMarginT - kMarginB;
    auto sx = [&](double x) { return kMarginL + (x - x_min) / (x_max - x_min) * px_w; };
    auto sy = [&](double y) { return kHeight - kMarginB - (y - y_min) / (y_max - y_min) * px_h; };

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">"
      << title << "</text>\n";

    // axes + ticks
    f << fmt("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
             sx(x_min), sy(y_min), sx(x_max), sy(y_min));
    f << fmt("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
             sx(x_min), sy(y_min), sx(x_min), sy(y_max));
    for (int i = 0; i <= 4; ++i) {
        const double tx = x_min + (x_max - x_min) * i / 4.0;
        const double ty = y_min + (y_max - y_min) * i / 4.0;
        f << fmt("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                 sx(tx), sy(y_min), sx(tx), sy(y_min) + 5);
        f << fmt("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" font-size=\"11\" "
                 "font-family=\"sans-serif\">%.2f</text>\n",
                 sx(tx), sy(y_min) + 18, tx);
        f << fmt("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                 sx(x_min) - 5, sy(ty), sx(x_min), sy(ty));
        f << fmt("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\" font-size=\"11\" "
                 "font-family=\"sans-serif\">%.2f</text>\n",
                 sx(x_min) - 8, sy(ty) + 4, ty);
    }
    f << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 10
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" << x_label
      << "</text>\n";
    f << "<text x=\"16\" y=\"" << kHeight / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 16 "
      << kHeight / 2 << ")\">" << y_label << "</text>\n";

    for (const auto& s : series) {
        if (s.points.empty()) continue;
        if (s.line) {
            f << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& [x, y] : s.points) f << fmt("%.1f,%.1f ", sx(x), sy(y));
            f << "\"/>\n";
        } else {
            for (const auto& [x, y] : s.points)
                f << fmt("<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"", sx(x), sy(y))
                  << s.color << "\" fill-opacity=\"0.7\"/>\n";
        }
    }
    f << "</svg>\n";
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

void write_cell_grid(const std::filesystem::path& path, const std::string& title, int grid_w,
                     int grid_h, const std::vector<std::pair<int, double>>& cells) {
    const int cell_px = std::clamp(560 / std::max(grid_w, grid_h), 4, 40);
    const int w = grid_w * cell_px + 40, h = grid_h * cell_px + 60;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << w
      << "\" height=\"" << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\" "
         "font-family=\"sans-serif\">"
      << title << "</text>\n";
    std::vector<double> value(static_cast<size_t>(grid_w) * grid_h, -1.0);
    for (const auto& [cell, v] : cells)
        if (cell >= 0 && cell < grid_w * grid_h) value[static_cast<size_t>(cell)] = v;
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            const double v = value[static_cast<size_t>(gy) * grid_w + gx];
            char color[16];
            if (v < 0.0) {
                std::snprintf(color, sizeof(color), "#eeeeee");
            } else {
                const int r = static_cast<int>(std::lround(40 + 215 * v));
                const int b = static_cast<int>(std::lround(255 - 215 * v));
                std::snprintf(color, sizeof(color), "#%02x30%02x", r, b);
            }
            f << "<rect x=\"" << 20 + gx * cell_px << "\" y=\"" << 40 + gy * cell_px
              << "\" width=\"" << cell_px - 1 << "\" height=\"" << cell_px - 1 << "\" fill=\""
              << color << "\"/>\n";
        }
    }
    f << "</svg>\n";
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

} // namespace concordia::svg
