#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace concordia::svg {

struct Series {
    std::vector<std::pair<double, double>> points;
    std::string color = "#1f6fb2";
    bool line = true; // false: scatter markers
};

/// Standalone SVG 1.1 line/scatter chart with axes and tick labels.
void write_plot(const std::filesystem::path& path, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const std::vector<Series>& series);

/// Colored cell grid; values in [0,1] map to a blue-to-red ramp, missing
/// cells stay light gray.
void write_cell_grid(const std::filesystem::path& path, const std::string& title, int grid_w,
                     int grid_h, const std::vector<std::pair<int, double>>& cells);

} // namespace concordia::svg
