#include "concordia/slidegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "concordia/rng.hpp"

namespace concordia::slidegen {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Diagnosis d) {
    switch (d) {
        case Diagnosis::MelanomaInSitu: return "melanoma_in_situ";
        case Diagnosis::InvasiveMelanoma: return "invasive_melanoma";
        case Diagnosis::DysplasticNevus: return "dysplastic_nevus";
        case Diagnosis::ConventionalNevus: return "conventional_nevus";
        case Diagnosis::Other: return "other";
    }
    throw std::logic_error("unreachable");
}

Diagnosis diagnosis_from_string(const std::string& s) {
    if (s == "melanoma_in_situ") return Diagnosis::MelanomaInSitu;
    if (s == "invasive_melanoma") return Diagnosis::InvasiveMelanoma;
    if (s == "dysplastic_nevus") return Diagnosis::DysplasticNevus;
    if (s == "conventional_nevus") return Diagnosis::ConventionalNevus;
    if (s == "other") return Diagnosis::Other;
    throw std::runtime_error("unknown diagnosis: " + s);
}

bool is_melanoma(Diagnosis d) {
    return d == Diagnosis::MelanomaInSitu || d == Diagnosis::InvasiveMelanoma;
}

std::string ConcordanceLabel::rendered() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", value());
    // strip a trailing zero so thirds render as 0.33 but halves as 0.5
    std::string s(buf);
    if (s.size() > 3 && s.back() == '0') s.pop_back();
    return s;
}

ConcordanceLabel concordance_rate(std::span<const PanelReview> reviews) {
    if (reviews.empty()) throw std::invalid_argument("empty panel");
    int melanoma = 0;
    for (const auto& r : reviews)
        if (is_melanoma(r.diagnosis)) ++melanoma;
    return ConcordanceLabel{melanoma, static_cast<int>(reviews.size())};
}

int nearest_panel_count(double c, int panel_size) {
    if (panel_size < 1) throw std::invalid_argument("panel size must be >= 1");
    const int k = static_cast<int>(std::floor(c * panel_size + 0.5));
    return std::clamp(k, 0, panel_size);
}

namespace {

constexpr double kTissueHue = 0.94, kTissueSat = 0.22, kTissueVal = 0.82;
constexpr double kLesionHue = 0.83, kLesionVal = 0.60;
constexpr double kBlurSigma = 2.5;
constexpr int kTileSize = 128;

void set_hsv(ImageU8& img, int x, int y, const Hsv& c) {
    uint8_t* p = img.px(x, y);
    hsv_to_rgb(c, p[0], p[1], p[2]);
}

void draw_lesion_blob(ImageU8& img, TruthMasks& truth, Rng& rng, double base_sat, double sigma_c,
                      int cx, int cy, double rx, double ry, double angle) {
    double blob_noise = rng.normal() * sigma_c;
    blob_noise = std::clamp(blob_noise, -2.5 * sigma_c, 2.5 * sigma_c);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int ext = static_cast<int>(std::ceil(std::max(rx, ry))) + 1;
    for (int y = std::max(0, cy - ext); y <= std::min(img.height - 1, cy + ext); ++y) {
        for (int x = std::max(0, cx - ext); x <= std::min(img.width - 1, cx + ext); ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            if ((u * u) / (rx * rx) + (v * v) / (ry * ry) > 1.0) continue;
            const double s =
                std::clamp(base_sat + blob_noise + rng.normal() * (0.5 * sigma_c), 0.02, 0.98);
            set_hsv(img, x, y,
                    Hsv{kLesionHue + rng.uniform(-0.01, 0.01), s,
                        kLesionVal + rng.uniform(-0.04, 0.04)});
            truth.lesion[static_cast<size_t>(y) * img.width + x] = 1;
        }
    }
}

void draw_ink_segment(ImageU8& img, TruthMasks& truth, Rng& rng, double x0, double y0, double x1,
                      double y1, double radius) {
    const int bx0 = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - radius)));
    const int bx1 = std::min(img.width - 1, static_cast<int>(std::ceil(std::max(x0, x1) + radius)));
    const int by0 = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - radius)));
    const int by1 =
        std::min(img.height - 1, static_cast<int>(std::ceil(std::max(y0, y1) + radius)));
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    for (int y = by0; y <= by1; ++y) {
        for (int x = bx0; x <= bx1; ++x) {
            double t = len2 > 0 ? ((x - x0) * dx + (y - y0) * dy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double px = x0 + t * dx, py = y0 + t * dy;
            const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
            if (d2 > radius * radius) continue;
            set_hsv(img, x, y,
                    Hsv{rng.uniform(0.58, 0.64), rng.uniform(0.85, 1.0), rng.uniform(0.18, 0.45)});
            truth.ink[static_cast<size_t>(y) * img.width + x] = 1;
        }
    }
}

} // namespace

Specimen generate_specimen(const std::string& specimen_id, double true_concordance,
                           const GenConfig& cfg, uint64_t seed) {
    if (cfg.width < kTileSize || cfg.height < kTileSize || cfg.width % kTileSize != 0 ||
        cfg.height % kTileSize != 0)
        throw std::invalid_argument("slide dimensions must be positive multiples of 128");
    if (cfg.sigma_c < 0) throw std::invalid_argument("sigma_c must be >= 0");
    if (true_concordance < 0.0 || true_concordance > 1.0)
        throw std::invalid_argument("true_concordance must be in [0,1]");

    Rng rng(seed);
    const int w = cfg.width, h = cfg.height;

    Specimen out;
    out.slide.specimen_id = specimen_id;
    out.slide.image = ImageU8(w, h);
    out.truth.width = w;
    out.truth.height = h;
    out.truth.lesion.assign(static_cast<size_t>(w) * h, 0);
    out.truth.ink.assign(static_cast<size_t>(w) * h, 0);
    ImageU8& img = out.slide.image;

    // background: near-white with a couple counts of channel jitter
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            uint8_t* p = img.px(x, y);
            p[0] = static_cast<uint8_t>(243 + rng.uniform_int(5));
            p[1] = static_cast<uint8_t>(242 + rng.uniform_int(5));
            p[2] = static_cast<uint8_t>(240 + rng.uniform_int(5));
        }
    }

    // tissue rectangle with speckle texture
    const double tf = rng.uniform(cfg.tissue_fraction_min, cfg.tissue_fraction_max);
    const int tw = std::min(w, static_cast<int>(std::lround(w * std::sqrt(tf))));
    const int th = std::min(h, static_cast<int>(std::lround(h * std::sqrt(tf))));
    const int tx0 = (w - tw) / 2, ty0 = (h - th) / 2;
    out.truth.tissue_x0 = tx0;
    out.truth.tissue_y0 = ty0;
    out.truth.tissue_w = tw;
    out.truth.tissue_h = th;
    for (int y = ty0; y < ty0 + th; ++y)
        for (int x = tx0; x < tx0 + tw; ++x)
            set_hsv(img, x, y,
                    Hsv{kTissueHue + rng.uniform(-0.015, 0.015),
                        kTissueSat + rng.uniform(-0.05, 0.05),
                        kTissueVal + rng.uniform(-0.05, 0.05)});

    // lesion blobs carrying the planted concordance signal
    const double base_sat = lesion_saturation(true_concordance);
    const int blob_count = 8 + static_cast<int>(rng.uniform_int(9));
    for (int b = 0; b < blob_count; ++b) {
        const double rx = rng.uniform(10.0, 30.0);
        const double ry = rng.uniform(10.0, 30.0);
        const int margin = static_cast<int>(std::ceil(std::max(rx, ry))) + 2;
        const int lo_x = tx0 + margin, hi_x = tx0 + tw - margin;
        const int lo_y = ty0 + margin, hi_y = ty0 + th - margin;
        if (hi_x <= lo_x || hi_y <= lo_y) continue;
        const int cx = lo_x + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(hi_x - lo_x)));
        const int cy = lo_y + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(hi_y - lo_y)));
        draw_lesion_blob(img, out.truth, rng, base_sat, cfg.sigma_c, cx, cy, rx, ry,
                         rng.uniform(0.0, 3.14159265358979));
    }

    // ink strokes
    if (rng.bernoulli(cfg.ink_prob)) {
        const int strokes = 1 + static_cast<int>(rng.uniform_int(3));
        for (int s = 0; s < strokes; ++s) {
            double x = tx0 + rng.uniform(0.0, static_cast<double>(tw));
            double y = ty0 + rng.uniform(0.0, static_cast<double>(th));
            double angle = rng.uniform(0.0, 2.0 * 3.14159265358979);
            const double radius = rng.uniform(2.0, 4.5);
            const int segments = 3 + static_cast<int>(rng.uniform_int(4));
            for (int g = 0; g < segments; ++g) {
                const double len = rng.uniform(30.0, 80.0);
                angle += rng.uniform(-0.7, 0.7);
                const double nx = std::clamp(x + len * std::cos(angle), 0.0, w - 1.0);
                const double ny = std::clamp(y + len * std::sin(angle), 0.0, h - 1.0);
                draw_ink_segment(img, out.truth, rng, x, y, nx, ny, radius);
                x = nx;
                y = ny;
            }
        }
    }

    // blurred rectangle, aligned to the tile grid
    if (rng.bernoulli(cfg.blur_prob)) {
        const int tiles_x = w / kTileSize, tiles_y = h / kTileSize;
        const int bw = 1 + static_cast<int>(rng.uniform_int(std::min(2, tiles_x)));
        const int bh = 1 + static_cast<int>(rng.uniform_int(std::min(2, tiles_y)));
        const int bx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tiles_x - bw + 1)));
        const int by = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(tiles_y - bh + 1)));
        out.truth.blur_x0 = bx * kTileSize;
        out.truth.blur_y0 = by * kTileSize;
        out.truth.blur_w = bw * kTileSize;
        out.truth.blur_h = bh * kTileSize;
        gaussian_blur_region(img, out.truth.blur_x0, out.truth.blur_y0, out.truth.blur_w,
                             out.truth.blur_h, kBlurSigma);
    }

    size_t ink_pixels = 0;
    for (const auto m : out.truth.ink) ink_pixels += m;
    GenerationMeta meta;
    meta.true_concordance = true_concordance;
    meta.lesion_intensity = base_sat;
    meta.ink_fraction = static_cast<double>(ink_pixels) / (static_cast<double>(w) * h);
    meta.blur_fraction =
        static_cast<double>(out.truth.blur_w) * out.truth.blur_h / (static_cast<double>(w) * h);
    meta.tissue_fraction = static_cast<double>(tw) * th / (static_cast<double>(w) * h);
    meta.seed = seed;
    out.slide.gen_meta = meta;

    // panel reviews hitting the nearest achievable rational
    const int p = cfg.panel_size;
    const int k = nearest_panel_count(true_concordance, p);
    std::vector<int> order(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
    std::vector<Diagnosis> diag(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) {
        const bool melanoma = i < k;
        if (melanoma)
            diag[static_cast<size_t>(order[static_cast<size_t>(i)])] =
                rng.bernoulli(0.5) ? Diagnosis::MelanomaInSitu : Diagnosis::InvasiveMelanoma;
        else {
            const uint64_t pick = rng.uniform_int(3);
            diag[static_cast<size_t>(order[static_cast<size_t>(i)])] =
                pick == 0 ? Diagnosis::DysplasticNevus
                          : (pick == 1 ? Diagnosis::ConventionalNevus : Diagnosis::Other);
        }
    }
    out.reviews.reserve(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) {
        char rid[16];
        std::snprintf(rid, sizeof(rid), "R%02d", i + 1);
        out.reviews.push_back(PanelReview{rid, diag[static_cast<size_t>(i)]});
    }
    return out;
}

double decode_lesion_saturation(const ImageU8& img, const TruthMasks& truth) {
    double sum = 0.0;
    size_t n = 0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const size_t i = static_cast<size_t>(y) * img.width + x;
            if (!truth.lesion[i] || truth.ink[i] || truth.in_blur(x, y)) continue;
            const uint8_t* p = img.px(x, y);
            sum += rgb_to_hsv(p[0], p[1], p[2]).s;
            ++n;
        }
    }
    if (n == 0) throw std::runtime_error("no decodable lesion pixels");
    return sum / static_cast<double>(n);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw std::logic_error("unreachable");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::runtime_error("unknown split: " + s);
}

namespace {

ordered_json record_to_json(const ManifestRecord& r) {
    ordered_json reviews = ordered_json::array();
    for (const auto& rev : r.reviews)
        reviews.push_back(
            {{"reviewer_id", rev.reviewer_id}, {"diagnosis", to_string(rev.diagnosis)}});
    return ordered_json{
        {"specimen_id", r.specimen_id},
        {"slides", r.slide_paths},
        {"site", r.site},
        {"reviews", std::move(reviews)},
        {"label",
         ordered_json{{"melanoma_count", r.label.melanoma_count},
                      {"panel_size", r.label.panel_size}}},
        {"split", to_string(r.split)},
        {"gen_meta",
         ordered_json{{"true_concordance", r.gen_meta.true_concordance},
                      {"lesion_intensity", r.gen_meta.lesion_intensity},
                      {"ink_fraction", r.gen_meta.ink_fraction},
                      {"blur_fraction", r.gen_meta.blur_fraction},
                      {"tissue_fraction", r.gen_meta.tissue_fraction},
                      {"seed", r.gen_meta.seed}}},
    };
}

ManifestRecord record_from_json(const ordered_json& j) {
    ManifestRecord r;
    r.specimen_id = j.at("specimen_id").get<std::string>();
    r.slide_paths = j.at("slides").get<std::vector<std::string>>();
    r.site = j.at("site").get<std::string>();
    for (const auto& rev : j.at("reviews"))
        r.reviews.push_back(PanelReview{rev.at("reviewer_id").get<std::string>(),
                                        diagnosis_from_string(rev.at("diagnosis"))});
    r.label.melanoma_count = j.at("label").at("melanoma_count").get<int>();
    r.label.panel_size = j.at("label").at("panel_size").get<int>();
    r.split = split_from_string(j.at("split").get<std::string>());
    const auto& m = j.at("gen_meta");
    r.gen_meta.true_concordance = m.at("true_concordance").get<double>();
    r.gen_meta.lesion_intensity = m.at("lesion_intensity").get<double>();
    r.gen_meta.ink_fraction = m.at("ink_fraction").get<double>();
    r.gen_meta.blur_fraction = m.at("blur_fraction").get<double>();
    r.gen_meta.tissue_fraction = m.at("tissue_fraction").get<double>();
    r.gen_meta.seed = m.at("seed").get<uint64_t>();
    return r;
}

void validate_manifest(const DatasetManifest& manifest) {
    std::set<std::string> ids;
    for (const auto& r : manifest) {
        if (r.specimen_id.empty()) throw std::runtime_error("empty specimen_id");
        if (!ids.insert(r.specimen_id).second)
            throw std::runtime_error("duplicate specimen_id: " + r.specimen_id);
        if (r.label.panel_size < 1 || r.label.melanoma_count < 0 ||
            r.label.melanoma_count > r.label.panel_size)
            throw std::runtime_error("invalid label for specimen " + r.specimen_id);
        if (std::abs(r.gen_meta.lesion_intensity -
                     lesion_saturation(r.gen_meta.true_concordance)) > 1e-9)
            throw std::runtime_error("inconsistent lesion_intensity for specimen " +
                                     r.specimen_id);
    }
}

} // namespace

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    validate_manifest(manifest);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    for (const auto& r : manifest) f << record_to_json(r).dump() << "\n";
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    DatasetManifest manifest;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            manifest.push_back(record_from_json(ordered_json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest parse error at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
    }
    validate_manifest(manifest);
    return manifest;
}

std::vector<Split> split_dataset(const std::vector<std::string>& specimen_ids,
                                 const std::array<double, 3>& fractions, uint64_t seed) {
    double sum = 0.0;
    for (const double f : fractions) {
        if (f < 0.0 || f > 1.0) throw std::invalid_argument("fraction out of [0,1]");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("fractions must sum to 1");

    const size_t n = specimen_ids.size();
    const auto n_val = static_cast<size_t>(std::floor(fractions[1] * static_cast<double>(n)));
    const auto n_test = static_cast<size_t>(std::floor(fractions[2] * static_cast<double>(n)));
    // remainder specimens from rounding go to train
    const size_t n_train = n - n_val - n_test;

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<Split> splits(n, Split::Train);
    for (size_t pos = 0; pos < n; ++pos) {
        Split s = Split::Train;
        if (pos >= n_train && pos < n_train + n_val)
            s = Split::Val;
        else if (pos >= n_train + n_val)
            s = Split::Test;
        splits[order[pos]] = s;
    }
    return splits;
}

} // namespace concordia::slidegen
