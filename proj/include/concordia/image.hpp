#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace concordia {

/// Row-major 8-bit RGB raster.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb; // width * height * 3 bytes

    ImageU8() = default;
    ImageU8(int w, int h, uint8_t fill = 0)
        : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, fill) {}

    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* px(int x, int y) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

struct Hsv {
    double h; // [0,1), wraps
    double s; // [0,1]
    double v; // [0,1]
};

Hsv rgb_to_hsv(uint8_t r, uint8_t g, uint8_t b);
void hsv_to_rgb(const Hsv& c, uint8_t& r, uint8_t& g, uint8_t& b);

/// Rec.601 luma (0.299, 0.587, 0.114), unquantized.
inline double luma(uint8_t r, uint8_t g, uint8_t b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

/// 256-bin histogram of rounded luma values.
std::vector<uint64_t> luma_histogram(const ImageU8& img);

/// In-place Gaussian blur of the axis-aligned rectangle [x0,x0+w) x [y0,y0+h).
/// Separable kernel, radius = ceil(3*sigma), edges clamped at image bounds.
void gaussian_blur_region(ImageU8& img, int x0, int y0, int w, int h, double sigma);

/// Right-angle rotation; quarter_turns counted counterclockwise.
ImageU8 rotate90(const ImageU8& img, int quarter_turns);

void write_ppm(const ImageU8& img, const std::filesystem::path& path);
ImageU8 read_ppm(const std::filesystem::path& path);

} // namespace concordia
