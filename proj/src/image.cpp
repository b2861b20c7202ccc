#include "concordia/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace concordia {

Hsv rgb_to_hsv(uint8_t r8, uint8_t g8, uint8_t b8) {
    const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out{0.0, 0.0, mx};
    if (mx > 0.0) out.s = d / mx;
    if (d > 0.0) {
        double h;
        if (mx == r)
            h = (g - b) / d;
        else if (mx == g)
            h = 2.0 + (b - r) / d;
        else
            h = 4.0 + (r - g) / d;
        h /= 6.0;
        if (h < 0.0) h += 1.0;
        out.h = h;
    }
    return out;
}

void hsv_to_rgb(const Hsv& c, uint8_t& r8, uint8_t& g8, uint8_t& b8) {
    double h = c.h - std::floor(c.h); // wrap to [0,1)
    const double s = std::clamp(c.s, 0.0, 1.0);
    const double v = std::clamp(c.v, 0.0, 1.0);
    const double hh = h * 6.0;
    const int sector = std::min(5, static_cast<int>(hh));
    const double f = hh - sector;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    double r, g, b;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    auto to8 = [](double x) {
        return static_cast<uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
    };
    r8 = to8(r);
    g8 = to8(g);
    b8 = to8(b);
}

std::vector<uint64_t> luma_histogram(const ImageU8& img) {
    std::vector<uint64_t> hist(256, 0);
    const size_t n = img.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const uint8_t* p = img.rgb.data() + i * 3;
        const int v = static_cast<int>(std::lround(luma(p[0], p[1], p[2])));
        hist[static_cast<size_t>(std::clamp(v, 0, 255))]++;
    }
    return hist;
}

void gaussian_blur_region(ImageU8& img, int x0, int y0, int w, int h, double sigma) {
    if (sigma <= 0.0 || w <= 0 || h <= 0) return;
    x0 = std::clamp(x0, 0, img.width);
    y0 = std::clamp(y0, 0, img.height);
    const int x1 = std::clamp(x0 + w, 0, img.width);
    const int y1 = std::clamp(y0 + h, 0, img.height);
    if (x1 <= x0 || y1 <= y0) return;

    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        ksum += v;
    }
    for (auto& v : kernel) v /= ksum;

    // horizontal pass into a scratch buffer covering the region
    const int rw = x1 - x0, rh = y1 - y0;
    std::vector<double> tmp(static_cast<size_t>(rw) * rh * 3);
    for (int y = 0; y < rh; ++y) {
        for (int x = 0; x < rw; ++x) {
            double acc[3] = {0, 0, 0};
            for (int k = -radius; k <= radius; ++k) {
                const int sx = std::clamp(x0 + x + k, 0, img.width - 1);
                const uint8_t* p = img.px(sx, y0 + y);
                const double kv = kernel[static_cast<size_t>(k + radius)];
                acc[0] += kv * p[0];
                acc[1] += kv * p[1];
                acc[2] += kv * p[2];
            }
            double* q = tmp.data() + (static_cast<size_t>(y) * rw + x) * 3;
            q[0] = acc[0];
            q[1] = acc[1];
            q[2] = acc[2];
        }
    }
    // vertical pass; rows outside the region read the original image
    std::vector<uint8_t> out(static_cast<size_t>(rw) * rh * 3);
    for (int y = 0; y < rh; ++y) {
        for (int x = 0; x < rw; ++x) {
            double acc[3] = {0, 0, 0};
            for (int k = -radius; k <= radius; ++k) {
                const int sy = y + k;
                const double kv = kernel[static_cast<size_t>(k + radius)];
                if (sy >= 0 && sy < rh) {
                    const double* p = tmp.data() + (static_cast<size_t>(sy) * rw + x) * 3;
                    acc[0] += kv * p[0];
                    acc[1] += kv * p[1];
                    acc[2] += kv * p[2];
                } else {
                    const int iy = std::clamp(y0 + sy, 0, img.height - 1);
                    const uint8_t* p = img.px(x0 + x, iy);
                    // horizontal blur of the out-of-region row, clamped reads
                    double hacc[3] = {0, 0, 0};
                    for (int j = -radius; j <= radius; ++j) {
                        const int sx = std::clamp(x0 + x + j, 0, img.width - 1);
                        const uint8_t* pp = img.px(sx, iy);
                        const double kj = kernel[static_cast<size_t>(j + radius)];
                        hacc[0] += kj * pp[0];
                        hacc[1] += kj * pp[1];
                        hacc[2] += kj * pp[2];
                    }
                    (void)p;
                    acc[0] += kv * hacc[0];
                    acc[1] += kv * hacc[1];
                    acc[2] += kv * hacc[2];
                }
            }
            uint8_t* q = out.data() + (static_cast<size_t>(y) * rw + x) * 3;
            for (int c = 0; c < 3; ++c)
                q[c] = static_cast<uint8_t>(std::lround(std::clamp(acc[c], 0.0, 255.0)));
        }
    }
    for (int y = 0; y < rh; ++y) {
        uint8_t* dst = img.px(x0, y0 + y);
        const uint8_t* src = out.data() + static_cast<size_t>(y) * rw * 3;
        std::copy(src, src + static_cast<size_t>(rw) * 3, dst);
    }
}

ImageU8 rotate90(const ImageU8& img, int quarter_turns) {
    const int q = ((quarter_turns % 4) + 4) % 4;
    if (q == 0) return img;
    const int w = img.width, h = img.height;
    ImageU8 out(q == 2 ? w : h, q == 2 ? h : w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int nx, ny;
            switch (q) {
                case 1: nx = y; ny = w - 1 - x; break;          // 90 deg CCW
                case 2: nx = w - 1 - x; ny = h - 1 - y; break;  // 180 deg
                default: nx = h - 1 - y; ny = x; break;         // 270 deg CCW
            }
            const uint8_t* s = img.px(x, y);
            uint8_t* d = out.px(nx, ny);
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }
    }
    return out;
}

void write_ppm(const ImageU8& img, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

ImageU8 read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("not a P6 PPM: " + path.string());
    auto next_token = [&f, &path]() {
        std::string tok;
        for (;;) {
            f >> tok;
            if (!f) throw std::runtime_error("truncated PPM header: " + path.string());
            if (tok[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return tok;
        }
    };
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0 || maxval != 255)
        throw std::runtime_error("unsupported PPM geometry: " + path.string());
    f.get(); // single whitespace after maxval
    ImageU8 img(w, h);
    f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw std::runtime_error("truncated PPM payload: " + path.string());
    return img;
}

} // namespace concordia
