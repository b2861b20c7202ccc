#include "concordia/qc.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "concordia/parallel.hpp"

namespace concordia::qc {

double TissueMask::coverage() const {
    if (bits.empty()) return 0.0;
    size_t on = 0;
    for (const auto b : bits) on += b;
    return static_cast<double>(on) / static_cast<double>(bits.size());
}

std::string to_string(RejectReason r) {
    switch (r) {
        case RejectReason::None: return "";
        case RejectReason::Ink: return "ink";
        case RejectReason::Blur: return "blur";
        case RejectReason::NonTissue: return "non_tissue";
    }
    throw std::logic_error("unreachable");
}

int otsu_threshold(std::span<const uint64_t> histogram) {
    if (histogram.size() != 256) throw std::invalid_argument("histogram must have 256 bins");
    uint64_t total = 0, weighted = 0;
    for (size_t i = 0; i < 256; ++i) {
        total += histogram[i];
        weighted += histogram[i] * i;
    }
    if (total == 0) throw std::invalid_argument("empty histogram");

    // Between-class variance at t is (s0*w1 - s1*w0)^2 / (w0*w1) up to a
    // constant. Compared exactly via cross-multiplication in 128-bit integers;
    // valid while total^6 * 255^2 stays below 2^128 (total <= ~500k).
    const bool exact = total <= 500000;
    using u128 = unsigned __int128;

    int best_t = -1;
    u128 best_num = 0; // A^2
    u128 best_den = 1; // B
    double best_var = -1.0;

    uint64_t w0 = 0, s0 = 0;
    for (int t = 0; t < 256; ++t) {
        w0 += histogram[static_cast<size_t>(t)];
        s0 += histogram[static_cast<size_t>(t)] * static_cast<uint64_t>(t);
        const uint64_t w1 = total - w0;
        if (w0 == 0 || w1 == 0) continue;
        const uint64_t s1 = weighted - s0;
        if (exact) {
            const auto lhs = static_cast<__int128>(s0) * w1;
            const auto rhs = static_cast<__int128>(s1) * w0;
            const u128 a = lhs >= rhs ? static_cast<u128>(lhs - rhs) : static_cast<u128>(rhs - lhs);
            const u128 num = a * a;
            const u128 den = static_cast<u128>(w0) * w1;
            if (best_t < 0 || num * best_den > best_num * den) {
                best_t = t;
                best_num = num;
                best_den = den;
            }
        } else {
            const double mu0 = static_cast<double>(s0) / static_cast<double>(w0);
            const double mu1 = static_cast<double>(s1) / static_cast<double>(w1);
            const double var = static_cast<double>(w0) * static_cast<double>(w1) * (mu0 - mu1) *
                               (mu0 - mu1);
            if (var > best_var) {
                best_var = var;
                best_t = t;
            }
        }
    }
    if (best_t < 0 || (exact && best_num == 0))
        throw std::runtime_error("degenerate histogram");
    return best_t;
}

namespace {

uint8_t luma_u8(const uint8_t* p) {
    return static_cast<uint8_t>(
        std::clamp<long>(std::lround(luma(p[0], p[1], p[2])), 0, 255));
}

} // namespace

TissueMask segment_tissue(const slidegen::SlideRaster& slide) {
    const ImageU8& img = slide.image;
    if (img.width <= 0 || img.height <= 0 || img.rgb.size() != img.pixel_count() * 3)
        throw std::invalid_argument("invalid raster");

    // keep the sampled grid small enough for the exact Otsu comparison
    int f = 1;
    while ((static_cast<long long>(img.width) / f) * (img.height / f) > 512LL * 512LL) f *= 2;

    TissueMask mask;
    mask.downsample = f;
    mask.width = (img.width + f - 1) / f;
    mask.height = (img.height + f - 1) / f;
    mask.bits.assign(static_cast<size_t>(mask.width) * mask.height, 0);

    std::vector<uint64_t> hist(256, 0);
    std::vector<uint8_t> lum(mask.bits.size());
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const uint8_t v = luma_u8(img.px(x * f, y * f));
            lum[static_cast<size_t>(y) * mask.width + x] = v;
            hist[v]++;
        }
    }

    int threshold;
    try {
        threshold = otsu_threshold(hist);
    } catch (const std::runtime_error&) {
        // degenerate: single luma value; classify the whole slide by brightness
        uint64_t total = 0, weighted = 0;
        for (size_t i = 0; i < 256; ++i) {
            total += hist[i];
            weighted += hist[i] * i;
        }
        const bool tissue = static_cast<double>(weighted) / static_cast<double>(total) < 128.0;
        std::fill(mask.bits.begin(), mask.bits.end(), tissue ? 1 : 0);
        return mask;
    }

    for (size_t i = 0; i < lum.size(); ++i) mask.bits[i] = lum[i] <= threshold ? 1 : 0;
    return mask;
}

std::vector<Tile> tile_slide(const slidegen::SlideRaster& slide, int slide_index,
                             const TissueMask& mask, int tile_size, double min_tissue_fraction) {
    const ImageU8& img = slide.image;
    if (tile_size <= 0 || img.width % tile_size != 0 || img.height % tile_size != 0)
        throw std::invalid_argument("tile size must divide slide dimensions");

    const int gx_count = img.width / tile_size;
    const int gy_count = img.height / tile_size;
    const int f = mask.downsample;

    std::vector<Tile> tiles;
    for (int gy = 0; gy < gy_count; ++gy) {
        for (int gx = 0; gx < gx_count; ++gx) {
            // coverage over the mask cells under the tile footprint
            const int mx0 = gx * tile_size / f;
            const int my0 = gy * tile_size / f;
            const int mx1 = std::min(mask.width, (gx + 1) * tile_size / f);
            const int my1 = std::min(mask.height, (gy + 1) * tile_size / f);
            size_t on = 0, cells = 0;
            for (int my = my0; my < my1; ++my)
                for (int mx = mx0; mx < mx1; ++mx) {
                    on += mask.at(mx, my) ? 1 : 0;
                    ++cells;
                }
            const double coverage =
                cells ? static_cast<double>(on) / static_cast<double>(cells) : 0.0;
            if (coverage < min_tissue_fraction) continue;

            Tile t;
            t.specimen_id = slide.specimen_id;
            t.slide_index = slide_index;
            t.grid_x = gx;
            t.grid_y = gy;
            t.pixels = ImageU8(tile_size, tile_size);
            for (int y = 0; y < tile_size; ++y) {
                const uint8_t* src = img.px(gx * tile_size, gy * tile_size + y);
                std::copy(src, src + static_cast<size_t>(tile_size) * 3, t.pixels.px(0, y));
            }
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

double laplacian_variance(const ImageU8& tile) {
    const int w = tile.width, h = tile.height;
    if (w < 3 || h < 3) throw std::invalid_argument("tile too small for Laplacian");
    std::vector<double> lum(static_cast<size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const uint8_t* p = tile.px(x, y);
            lum[static_cast<size_t>(y) * w + x] = luma(p[0], p[1], p[2]);
        }
    const size_t m = static_cast<size_t>(w - 2) * (h - 2);
    double sum = 0.0, sum_sq = 0.0;
    for (int y = 1; y < h - 1; ++y) {
        for (int x = 1; x < w - 1; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            const double r = lum[i - w] + lum[i + w] + lum[i - 1] + lum[i + 1] - 4.0 * lum[i];
            sum += r;
            sum_sq += r * r;
        }
    }
    const double mean = sum / static_cast<double>(m);
    return sum_sq / static_cast<double>(m) - mean * mean;
}

double ink_fraction(const ImageU8& tile) {
    size_t ink = 0;
    const size_t n = tile.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const uint8_t* p = tile.rgb.data() + i * 3;
        const Hsv c = rgb_to_hsv(p[0], p[1], p[2]);
        if (c.h >= 0.55 && c.h <= 0.70 && c.s >= 0.45 && c.v <= 0.62) ++ink;
    }
    return static_cast<double>(ink) / static_cast<double>(n);
}

QcFilterResult qc_filter(std::vector<Tile> tiles, double blur_threshold, double ink_threshold) {
    if (blur_threshold < 0 || ink_threshold < 0)
        throw std::invalid_argument("thresholds must be >= 0");

    QcFilterResult out;
    out.verdicts.resize(tiles.size());
    const long long n = static_cast<long long>(tiles.size());
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long i = 0; i < n; ++i) {
        const Tile& t = tiles[static_cast<size_t>(i)];
        QcVerdict v;
        v.specimen_id = t.specimen_id;
        v.slide_index = t.slide_index;
        v.grid_x = t.grid_x;
        v.grid_y = t.grid_y;
        v.ink_fraction = ink_fraction(t.pixels);
        v.blur_score = laplacian_variance(t.pixels);
        if (v.ink_fraction > ink_threshold)
            v.reason = RejectReason::Ink;
        else if (v.blur_score < blur_threshold)
            v.reason = RejectReason::Blur;
        else
            v.accepted = true;
        out.verdicts[static_cast<size_t>(i)] = std::move(v);
    }
    for (size_t i = 0; i < tiles.size(); ++i)
        if (out.verdicts[i].accepted) out.accepted.push_back(std::move(tiles[i]));
    return out;
}

SlideQcResult qc_slide(const slidegen::SlideRaster& slide, int slide_index,
                       const QcParams& params) {
    const TissueMask mask = segment_tissue(slide);
    auto tiles =
        tile_slide(slide, slide_index, mask, params.tile_size, params.min_tissue_fraction);
    auto filtered = qc_filter(std::move(tiles), params.blur_threshold, params.ink_threshold);

    SlideQcResult out;
    out.accepted = std::move(filtered.accepted);

    // full-grid verdicts: splice in NonTissue rows for cells that never
    // reached the filter, keeping row-major order
    const int gx_count = slide.image.width / params.tile_size;
    const int gy_count = slide.image.height / params.tile_size;
    size_t next = 0;
    for (int gy = 0; gy < gy_count; ++gy) {
        for (int gx = 0; gx < gx_count; ++gx) {
            if (next < filtered.verdicts.size() && filtered.verdicts[next].grid_x == gx &&
                filtered.verdicts[next].grid_y == gy) {
                out.verdicts.push_back(filtered.verdicts[next++]);
                continue;
            }
            QcVerdict v;
            v.specimen_id = slide.specimen_id;
            v.slide_index = slide_index;
            v.grid_x = gx;
            v.grid_y = gy;
            v.accepted = false;
            v.reason = RejectReason::NonTissue;
            out.verdicts.push_back(std::move(v));
        }
    }
    return out;
}

} // namespace concordia::qc
