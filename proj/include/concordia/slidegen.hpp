#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "concordia/image.hpp"

namespace concordia::slidegen {

enum class Diagnosis {
    MelanomaInSitu,
    InvasiveMelanoma,
    DysplasticNevus,
    ConventionalNevus,
    Other,
};

std::string to_string(Diagnosis d);
Diagnosis diagnosis_from_string(const std::string& s);

bool is_melanoma(Diagnosis d);

struct PanelReview {
    std::string reviewer_id;
    Diagnosis diagnosis;
    bool operator==(const PanelReview&) const = default;
};

/// Fraction of the review panel rendering a melanoma diagnosis, kept as the
/// exact rational melanoma_count / panel_size. Rendering to two decimals is
/// display-only; arithmetic always uses the rational.
struct ConcordanceLabel {
    int melanoma_count = 0;
    int panel_size = 1;
    double value() const { return static_cast<double>(melanoma_count) / panel_size; }
    std::string rendered() const; // e.g. 1/3 -> "0.33"
    bool operator==(const ConcordanceLabel&) const = default;
};

ConcordanceLabel concordance_rate(std::span<const PanelReview> reviews);

/// Planted-signal map from concordance to lesion saturation: linear and
/// invertible so tests can decode the signal analytically.
inline double lesion_saturation(double c) { return 0.2 + 0.6 * c; }
inline double invert_lesion_saturation(double s) { return (s - 0.2) / 0.6; }

struct GenerationMeta {
    double true_concordance = 0.0;
    double lesion_intensity = 0.0; // = lesion_saturation(true_concordance)
    double ink_fraction = 0.0;
    double blur_fraction = 0.0;
    double tissue_fraction = 0.0;
    uint64_t seed = 0;
    bool operator==(const GenerationMeta&) const = default;
};

struct SlideRaster {
    std::string specimen_id;
    ImageU8 image;
    GenerationMeta gen_meta;
};

struct GenConfig {
    int width = 512;  // multiple of 128
    int height = 512; // multiple of 128
    int panel_size = 5;
    double sigma_c = 0.05; // lesion saturation noise scale
    double ink_prob = 0.25;
    double blur_prob = 0.25;
    double tissue_fraction_min = 0.55;
    double tissue_fraction_max = 0.80;
};

/// Per-pixel ground truth kept by the generator for oracle decoding and QC
/// truth flags. Never persisted.
struct TruthMasks {
    int width = 0, height = 0;
    std::vector<uint8_t> lesion; // 1 = lesion pixel
    std::vector<uint8_t> ink;    // 1 = ink stroke pixel
    int blur_x0 = 0, blur_y0 = 0, blur_w = 0, blur_h = 0; // tile-aligned; w==0 means no blur

    bool in_blur(int x, int y) const {
        return blur_w > 0 && x >= blur_x0 && x < blur_x0 + blur_w && y >= blur_y0 &&
               y < blur_y0 + blur_h;
    }
    // tissue rectangle actually drawn (for segmentation-coverage checks)
    int tissue_x0 = 0, tissue_y0 = 0, tissue_w = 0, tissue_h = 0;
};

struct Specimen {
    SlideRaster slide;
    std::vector<PanelReview> reviews;
    TruthMasks truth;
};

/// Nearest achievable melanoma count for a target concordance, ties rounded up.
int nearest_panel_count(double c, int panel_size);

/// Deterministic synthetic specimen: background + textured tissue rectangle +
/// elliptical lesion blobs whose saturation encodes lesion_saturation(c),
/// optional ink strokes in the reserved blue hue band and an optional
/// Gaussian-blurred tile-aligned rectangle.
Specimen generate_specimen(const std::string& specimen_id, double true_concordance,
                           const GenConfig& cfg, uint64_t seed);

/// Oracle decoder: mean HSV saturation over lesion pixels that are neither
/// inked over nor inside the blurred rectangle.
double decode_lesion_saturation(const ImageU8& img, const TruthMasks& truth);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestRecord {
    std::string specimen_id;
    std::vector<std::string> slide_paths;
    std::string site; // empty = no per-site stratification
    std::vector<PanelReview> reviews;
    ConcordanceLabel label;
    Split split = Split::Train;
    GenerationMeta gen_meta;
    bool operator==(const ManifestRecord&) const = default;
};

using DatasetManifest = std::vector<ManifestRecord>;

/// One JSON object per line, fixed field order, byte-stable for fixed input.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Deterministic seeded partition; floor counts for val/test, remainder to
/// train. Returned splits align with the input id order.
std::vector<Split> split_dataset(const std::vector<std::string>& specimen_ids,
                                 const std::array<double, 3>& fractions, uint64_t seed);

} // namespace concordia::slidegen
