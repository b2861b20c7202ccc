#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "concordia/image.hpp"
#include "concordia/slidegen.hpp"

namespace concordia::qc {

inline constexpr int kTileSize = 128;

// Calibrated on a held-out synthetic corpus: clean tissue tiles score in the
// 700-1600 range on Laplacian variance while blurred regions stay below 5;
// the ink heuristic reads >= 0.03 on contaminated tiles and 0 on clean ones.
inline constexpr double kDefaultBlurThreshold = 40.0;
inline constexpr double kDefaultInkThreshold = 0.02;

/// Binary tissue mask, possibly on a grid downsampled by `downsample`.
struct TissueMask {
    int width = 0;
    int height = 0;
    int downsample = 1;
    std::vector<uint8_t> bits;

    bool at(int x, int y) const { return bits[static_cast<size_t>(y) * width + x] != 0; }
    double coverage() const;
};

struct Tile {
    std::string specimen_id;
    int slide_index = 0;
    int grid_x = 0;
    int grid_y = 0;
    ImageU8 pixels; // kTileSize x kTileSize
};

enum class RejectReason { None, Ink, Blur, NonTissue };
std::string to_string(RejectReason r);

struct QcVerdict {
    std::string specimen_id;
    int slide_index = 0;
    int grid_x = 0;
    int grid_y = 0;
    bool accepted = false;
    RejectReason reason = RejectReason::None;
    double blur_score = 0.0;
    double ink_fraction = 0.0;
};

/// Otsu's threshold over a 256-bin histogram: the t in [0,255] maximizing
/// between-class variance, lowest t on ties. The argmax is evaluated in exact
/// integer arithmetic for histograms of up to ~500k samples (every caller in
/// this project stays below that), so it agrees with an exhaustive scan
/// bit-for-bit.
int otsu_threshold(std::span<const uint64_t> histogram);

/// Luma-threshold segmentation; pixels at or below the Otsu threshold (the
/// darker class) are tissue. Degenerate histograms map to all-tissue when the
/// mean luma is below 128, else all-background.
TissueMask segment_tissue(const slidegen::SlideRaster& slide);

std::vector<Tile> tile_slide(const slidegen::SlideRaster& slide, int slide_index,
                             const TissueMask& mask, int tile_size, double min_tissue_fraction);

/// Variance of the 3x3 Laplacian [[0,1,0],[1,-4,1],[0,1,0]] over the tile
/// interior (no padding), population variance, on unquantized luma.
double laplacian_variance(const ImageU8& tile);

/// Fraction of pixels inside the reserved ink gamut:
/// hue in [0.55, 0.70], saturation >= 0.45, value <= 0.62.
double ink_fraction(const ImageU8& tile);

struct QcFilterResult {
    std::vector<Tile> accepted;
    std::vector<QcVerdict> verdicts; // one per input tile, input order
};

/// Ink check first, then blur: reject when ink_fraction > ink_threshold or
/// laplacian_variance < blur_threshold.
QcFilterResult qc_filter(std::vector<Tile> tiles, double blur_threshold, double ink_threshold);

struct QcParams {
    int tile_size = kTileSize;
    double min_tissue_fraction = 0.6;
    double blur_threshold = kDefaultBlurThreshold;
    double ink_threshold = kDefaultInkThreshold;
};

struct SlideQcResult {
    std::vector<Tile> accepted;
    std::vector<QcVerdict> verdicts; // every grid cell: NonTissue cells included
};

/// Full per-slide QC stage: segment, tile, filter. Verdicts cover the whole
/// tile grid; cells below the tissue-coverage bar appear as NonTissue.
SlideQcResult qc_slide(const slidegen::SlideRaster& slide, int slide_index, const QcParams& params);

} // namespace concordia::qc
