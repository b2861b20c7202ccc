#include "concordia/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "concordia/parallel.hpp"
#include "concordia/rng.hpp"
#include "concordia/svg.hpp"

namespace fs = std::filesystem;

namespace concordia::pipeline {

// ---------------------------------------------------------------------------
// KvConfig
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

KvConfig KvConfig::parse_string(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        cfg.set(key, value);
    }
    return cfg;
}

KvConfig KvConfig::parse_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str());
}

std::string KvConfig::serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

bool KvConfig::has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&key](const auto& e) { return e.first == key; });
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    return fallback;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    const std::string v = get(key, "");
    if (v.empty()) return fallback;
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + v);
    }
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    const std::string v = get(key, "");
    if (v.empty()) return fallback;
    try {
        size_t pos = 0;
        const int i = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: " + v);
    }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
    const std::string v = get(key, "");
    if (v.empty()) return fallback;
    try {
        size_t pos = 0;
        const uint64_t u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an unsigned integer: " + v);
    }
}

void KvConfig::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

uint64_t fnv1a64(const void* data, size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string digest_file_hex(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for digest: " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        const auto got = f.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

void log_line(const std::string& stage, const std::string& message) {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    std::cerr << "[" << stamp << "] [" << stage << "] " << message << "\n";
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

void run_gen(const GenOptions& opt) {
    fs::create_directories(opt.out_dir / "slides");

    const int n = opt.n_specimens;
    if (n < 1) throw std::invalid_argument("n_specimens must be >= 1");
    // validate the config before the parallel region so failures surface as
    // exceptions rather than aborting inside it
    if (opt.gen.width < 128 || opt.gen.height < 128 || opt.gen.width % 128 != 0 ||
        opt.gen.height % 128 != 0)
        throw std::invalid_argument("slide dimensions must be positive multiples of 128");
    if (opt.gen.sigma_c < 0) throw std::invalid_argument("sigma_c must be >= 0");

    std::vector<slidegen::ManifestRecord> records(static_cast<size_t>(n));
    std::vector<slidegen::Specimen> specimens(static_cast<size_t>(n));
#pragma omp parallel for num_threads(par::max_threads()) schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "spec_%04d", i);
        Rng label_rng(derive_seed(opt.seed, 0xC0 + static_cast<uint64_t>(i)));
        const double c = label_rng.uniform();
        specimens[static_cast<size_t>(i)] =
            slidegen::generate_specimen(id, c, opt.gen, derive_seed(opt.seed, i));
    }
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back(specimens[static_cast<size_t>(i)].slide.specimen_id);
    const auto splits = slidegen::split_dataset(ids, opt.fractions, derive_seed(opt.seed, 0x5D17));

    for (int i = 0; i < n; ++i) {
        auto& sp = specimens[static_cast<size_t>(i)];
        const std::string filename = sp.slide.specimen_id + "_0.ppm";
        write_ppm(sp.slide.image, opt.out_dir / "slides" / filename);
        slidegen::ManifestRecord rec;
        rec.specimen_id = sp.slide.specimen_id;
        rec.slide_paths = {"slides/" + filename};
        rec.reviews = sp.reviews;
        rec.label = slidegen::concordance_rate(sp.reviews);
        rec.split = splits[static_cast<size_t>(i)];
        rec.gen_meta = sp.slide.gen_meta;
        records[static_cast<size_t>(i)] = std::move(rec);
    }
    slidegen::write_manifest(records, opt.out_dir / "manifest.jsonl");
}

// ---------------------------------------------------------------------------
// qc
// ---------------------------------------------------------------------------

std::string tile_filename(const std::string& specimen_id, int slide, int gx, int gy) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "__s%d_x%d_y%d.ppm", slide, gx, gy);
    return specimen_id + buf;
}

void run_qc(const QcOptions& opt) {
    const auto manifest = slidegen::read_manifest(opt.manifest);
    fs::create_directories(opt.out_dir);
    const fs::path base = opt.manifest.parent_path();

    std::ofstream csv(opt.out_dir / "verdicts.csv", std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write verdicts.csv");
    csv << "specimen_id,slide,gx,gy,accepted,reason,blur_score,ink_fraction\n";

    std::vector<qc::SlideQcResult> results(manifest.size());
    // slides processed in manifest order; the per-tile filtering inside
    // qc_slide is what runs parallel
    for (size_t mi = 0; mi < manifest.size(); ++mi) {
        const auto& rec = manifest[mi];
        for (size_t si = 0; si < rec.slide_paths.size(); ++si) {
            slidegen::SlideRaster slide;
            slide.specimen_id = rec.specimen_id;
            slide.image = read_ppm(base / rec.slide_paths[si]);
            slide.gen_meta = rec.gen_meta;
            auto result = qc_slide(slide, static_cast<int>(si), opt.params);
            if (si == 0) {
                results[mi] = std::move(result);
            } else {
                auto& dst = results[mi];
                for (auto& t : result.accepted) dst.accepted.push_back(std::move(t));
                for (auto& v : result.verdicts) dst.verdicts.push_back(std::move(v));
            }
        }
    }

    char buf[256];
    for (size_t mi = 0; mi < manifest.size(); ++mi) {
        for (const auto& v : results[mi].verdicts) {
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%d,%s,%.6f,%.6f\n",
                          v.specimen_id.c_str(), v.slide_index, v.grid_x, v.grid_y,
                          v.accepted ? 1 : 0, qc::to_string(v.reason).c_str(), v.blur_score,
                          v.ink_fraction);
            csv << buf;
        }
        for (const auto& t : results[mi].accepted)
            write_ppm(t.pixels,
                      opt.out_dir / tile_filename(t.specimen_id, t.slide_index, t.grid_x, t.grid_y));
    }
}

std::vector<qc::Tile> load_accepted_tiles(const fs::path& qc_dir) {
    std::ifstream csv(qc_dir / "verdicts.csv");
    if (!csv) throw std::runtime_error("cannot open " + (qc_dir / "verdicts.csv").string());
    std::vector<qc::Tile> tiles;
    std::string line;
    size_t line_no = 0;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) continue;
        std::stringstream ss(line);
        std::string id, slide, gx, gy, accepted, rest;
        if (!std::getline(ss, id, ',') || !std::getline(ss, slide, ',') ||
            !std::getline(ss, gx, ',') || !std::getline(ss, gy, ',') ||
            !std::getline(ss, accepted, ','))
            throw std::runtime_error("bad verdicts row at line " + std::to_string(line_no));
        if (accepted != "1") continue;
        qc::Tile t;
        t.specimen_id = id;
        t.slide_index = std::stoi(slide);
        t.grid_x = std::stoi(gx);
        t.grid_y = std::stoi(gy);
        t.pixels = read_ppm(qc_dir / tile_filename(id, t.slide_index, t.grid_x, t.grid_y));
        tiles.push_back(std::move(t));
    }
    return tiles;
}

// ---------------------------------------------------------------------------
// pretrain / embed
// ---------------------------------------------------------------------------

namespace {

void write_curve_csv(const features::LossCurve& curve, const fs::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "epoch,train_loss,val_loss\n";
    char buf[96];
    for (size_t e = 0; e < curve.train.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", e, curve.train[e], curve.val[e]);
        f << buf;
    }
}

} // namespace

void run_pretrain(const PretrainOptions& opt) {
    const auto manifest = slidegen::read_manifest(opt.manifest);
    std::set<std::string> train_ids;
    for (const auto& rec : manifest)
        if (rec.split == slidegen::Split::Train) train_ids.insert(rec.specimen_id);

    std::vector<ImageU8> tiles;
    for (auto& tile : load_accepted_tiles(opt.tiles_dir))
        if (train_ids.count(tile.specimen_id)) tiles.push_back(std::move(tile.pixels));
    log_line("pretrain", "training tiles: " + std::to_string(tiles.size()));

    const auto result = features::train_contrastive(tiles, opt.cfg);
    features::save_encoder(result.params, opt.out_encoder);
    write_curve_csv(result.curve, opt.out_curve);
}

void run_embed(const EmbedOptions& opt) {
    const auto encoder = features::load_encoder(opt.encoder);
    const auto tiles = load_accepted_tiles(opt.tiles_dir);
    const auto store = features::embed_tiles(encoder, tiles);
    features::write_embedding_store(store, opt.out_store);
}

// ---------------------------------------------------------------------------
// train / predict
// ---------------------------------------------------------------------------

void run_train(const TrainOptions& opt) {
    const auto manifest = slidegen::read_manifest(opt.manifest);
    const auto store = features::read_embedding_store(opt.embeddings);
    auto bags = milreg::build_bags(store, manifest);
    milreg::TrainConfig cfg = opt.cfg;
    cfg.regressor.input_dim = static_cast<int>(store.dim);

    milreg::ReembedFn reembed;
    features::EncoderParams encoder;
    std::map<std::string, std::vector<qc::Tile>> tiles_by_specimen;
    if (cfg.augment == milreg::AugmentMode::Reembed) {
        if (!opt.tiles_dir || !opt.encoder)
            throw std::invalid_argument("reembed augmentation needs --tiles and --encoder");
        encoder = features::load_encoder(*opt.encoder);
        for (auto& t : load_accepted_tiles(*opt.tiles_dir))
            tiles_by_specimen[t.specimen_id].push_back(std::move(t));
        reembed = [&encoder, &tiles_by_specimen](const milreg::EmbeddingBag& bag,
                                                 uint64_t epoch_seed) {
            const auto it = tiles_by_specimen.find(bag.specimen_id);
            if (it == tiles_by_specimen.end()) return bag;
            features::AugmentationConfig aug; // defaults match pretraining
            std::vector<qc::Tile> augmented = it->second;
            for (size_t i = 0; i < augmented.size(); ++i) {
                Rng rng(derive_seed(epoch_seed, i));
                augmented[i].pixels = features::augment(augmented[i].pixels, aug, rng);
            }
            const auto st = features::embed_tiles(encoder, augmented);
            milreg::EmbeddingBag out = bag;
            out.count = static_cast<int>(st.records.size());
            out.instances.clear();
            for (const auto& r : st.records)
                for (const float v : r.vec) out.instances.push_back(v);
            return out;
        };
    }

    const auto result = milreg::train_regressor(bags, cfg, reembed);
    milreg::save_regressor(result.params, opt.out_model);
    write_curve_csv(result.curve, opt.out_curve);
    log_line("train", "best epoch: " + std::to_string(result.best_epoch));
}

void run_predict(const PredictOptions& opt) {
    const auto manifest = slidegen::read_manifest(opt.manifest);
    const auto store = features::read_embedding_store(opt.embeddings);
    const auto model = milreg::load_regressor(opt.model);
    const auto bags = milreg::build_bags(store, manifest);
    if (bags.empty()) throw std::runtime_error("no specimens with embeddings to predict");

    std::map<std::string, double> predicted;
    for (const auto& bag : bags) predicted[bag.specimen_id] = milreg::predict_bag(model, bag);

    // specimens whose every tile was rejected in QC fall back to the
    // train-split label mean so downstream evaluation stays total
    double train_mean = 0.0;
    size_t train_n = 0;
    for (const auto& rec : manifest) {
        if (rec.split != slidegen::Split::Train) continue;
        train_mean += rec.label.value();
        ++train_n;
    }
    train_mean = train_n ? train_mean / static_cast<double>(train_n) : 0.5;

    std::vector<stats::PredictionRow> rows;
    for (const auto& rec : manifest) {
        stats::PredictionRow row;
        row.specimen_id = rec.specimen_id;
        const auto it = predicted.find(rec.specimen_id);
        if (it != predicted.end()) {
            row.prediction = it->second;
        } else {
            log_line("predict", "specimen " + rec.specimen_id +
                                    " has no tiles after QC; using train-mean fallback");
            row.prediction = train_mean;
        }
        row.label = rec.label.value();
        row.split = rec.split;
        rows.push_back(std::move(row));
    }
    stats::write_predictions_csv(rows, opt.out_csv);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void run_eval(const EvalOptions& opt) {
    const auto manifest = slidegen::read_manifest(opt.manifest);
    const auto predictions = stats::read_predictions_csv(opt.predictions);
    fs::create_directories(opt.out_dir);

    stats::EvalConfig cfg;
    cfg.n_resamples = opt.resamples;
    cfg.confidence = opt.confidence;
    cfg.seed = opt.seed;

    if (opt.gt_threshold.has_value()) {
        cfg.gt_threshold = *opt.gt_threshold;
    } else {
        // grid-search the ground-truth threshold on the test split
        std::vector<double> preds, labels;
        std::map<std::string, double> by_id;
        for (const auto& row : predictions) by_id[row.specimen_id] = row.prediction;
        for (const auto& rec : manifest) {
            if (rec.split != slidegen::Split::Test) continue;
            const auto it = by_id.find(rec.specimen_id);
            if (it == by_id.end()) continue;
            preds.push_back(it->second);
            labels.push_back(rec.label.value());
        }
        if (labels.empty()) throw std::runtime_error("no test predictions for grid search");
        const auto grid = stats::default_threshold_grid(labels);
        const auto search = stats::grid_search_gt_threshold(labels, preds, grid);
        cfg.gt_threshold = search.best_threshold;
        std::ofstream f(opt.out_dir / "threshold_search.csv", std::ios::binary);
        f << "threshold,auc,average_precision\n";
        char buf[96];
        for (const auto& e : search.entries) {
            std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f\n", e.threshold, e.auc,
                          e.average_precision);
            f << buf;
        }
        log_line("eval", "grid-searched gt threshold: " + std::to_string(cfg.gt_threshold));
    }

    const auto report = stats::evaluate(predictions, manifest, cfg);
    stats::write_metrics_csv(report, opt.out_dir / "metrics.csv");

    // scatter
    {
        svg::Series diag{{{0, 0}, {1, 1}}, "#999999", true};
        svg::Series pts;
        pts.line = false;
        for (size_t i = 0; i < report.preds.size(); ++i)
            pts.points.emplace_back(report.labels[i], report.preds[i]);
        svg::write_plot(opt.out_dir / "scatter.svg", "Predictions vs labels (test)",
                        "concordance label", "predicted concordance", {diag, pts});
    }
    if (report.diagnostics_available) {
        svg::Series diag{{{0, 0}, {1, 1}}, "#999999", true};
        svg::Series pts;
        pts.line = false;
        pts.points = report.pp;
        svg::write_plot(opt.out_dir / "pp.svg", "P-P plot of standardized residuals",
                        "empirical CDF", "normal CDF", {diag, pts});
    }
    if (!report.roc.curve.empty()) {
        svg::Series diag{{{0, 0}, {1, 1}}, "#999999", true};
        svg::Series curve;
        for (const auto& p : report.roc.curve) curve.points.emplace_back(p.fpr, p.tpr);
        svg::write_plot(opt.out_dir / "roc.svg", "ROC (malignancy from predicted concordance)",
                        "false positive rate", "true positive rate", {diag, curve});
    }
    if (!report.pr.curve.empty()) {
        svg::Series curve;
        curve.points = report.pr.curve;
        svg::write_plot(opt.out_dir / "pr.svg", "Precision-recall", "recall", "precision",
                        {curve});
    }
    if (opt.embeddings.has_value()) {
        const auto store = features::read_embedding_store(*opt.embeddings);
        std::map<std::string, double> label_of;
        for (const auto& rec : manifest) label_of[rec.specimen_id] = rec.label.value();
        const size_t n = store.records.size();
        if (n > 0) {
            const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
            std::vector<double> flat;
            flat.reserve(n * store.dim);
            for (const auto& r : store.records)
                for (const float v : r.vec) flat.push_back(v);
            const auto grid =
                stats::projection_grid(flat, n, static_cast<int>(store.dim), side, side);
            std::vector<std::pair<int, double>> cells;
            for (size_t i = 0; i < n; ++i) {
                const auto it = label_of.find(store.records[i].specimen_id);
                cells.emplace_back(grid.cell[i], it != label_of.end() ? it->second : 0.0);
            }
            svg::write_cell_grid(opt.out_dir / "grid.svg",
                                 "Tile embeddings on a 2D projection grid", side, side, cells);
        }
    }
}

// ---------------------------------------------------------------------------
// run_pipeline
// ---------------------------------------------------------------------------

KvConfig default_config() {
    return KvConfig::parse_string(R"(seed = 42
out_dir = run_out
gen.n_specimens = 120
gen.width = 512
gen.height = 512
gen.panel_size = 5
gen.noise = 0.05
gen.ink_prob = 0.25
gen.blur_prob = 0.25
split.train = 0.70
split.val = 0.15
split.test = 0.15
qc.min_tissue_fraction = 0.6
qc.blur_threshold = 40.0
qc.ink_threshold = 0.02
pretrain.epochs = 10
pretrain.batch = 32
pretrain.tau = 0.1
pretrain.lr = 0.002
pretrain.momentum = 0.9
pretrain.embed_dim = 64
pretrain.color_jitter = 0.15
pretrain.noise_variance = 0.001
train.lr = 0.01
train.momentum = 0.9
train.epochs = 100
train.dropout = 0.2
train.accum = 8
train.loss = rmse
train.augment = none
train.jitter_sigma = 0.1
eval.gt_threshold = auto
eval.resamples = 2000
eval.confidence = 0.90
)");
}

namespace {

KvConfig resolve_config(const KvConfig& cfg) {
    KvConfig resolved = default_config();
    const auto known = resolved.entries(); // copy of defaults for key set
    for (const auto& [k, v] : cfg.entries()) {
        const bool is_known = std::any_of(known.begin(), known.end(),
                                          [&k](const auto& e) { return e.first == k; });
        if (!is_known) throw ConfigError("unknown config key: " + k);
        resolved.set(k, v);
    }
    return resolved;
}

void validate_config(const KvConfig& cfg) {
    if (cfg.get("out_dir", "").empty()) throw ConfigError("out_dir must not be empty");
    const double tr = cfg.get_double("split.train", -1), va = cfg.get_double("split.val", -1),
                 te = cfg.get_double("split.test", -1);
    if (tr < 0 || tr > 1 || va < 0 || va > 1 || te < 0 || te > 1 ||
        std::abs(tr + va + te - 1.0) > 1e-9)
        throw ConfigError("split fractions must lie in [0,1] and sum to 1");
    if (cfg.get_int("gen.n_specimens", 0) < 1) throw ConfigError("gen.n_specimens must be >= 1");
    if (cfg.get_int("gen.width", 0) % 128 != 0 || cfg.get_int("gen.height", 0) % 128 != 0)
        throw ConfigError("gen dimensions must be multiples of 128");
    if (cfg.get_double("gen.noise", 0) < 0) throw ConfigError("gen.noise must be >= 0");
    if (cfg.get_double("pretrain.tau", 0.1) <= 0) throw ConfigError("pretrain.tau must be > 0");
    const std::string loss = cfg.get("train.loss", "rmse");
    if (loss != "rmse" && loss != "ce") throw ConfigError("train.loss must be rmse or ce");
    const std::string aug = cfg.get("train.augment", "none");
    if (aug != "none" && aug != "jitter" && aug != "reembed")
        throw ConfigError("train.augment must be none, jitter or reembed");
    const std::string gt = cfg.get("eval.gt_threshold", "auto");
    if (gt != "auto") {
        try {
            (void)std::stod(gt);
        } catch (...) {
            throw ConfigError("eval.gt_threshold must be a number or 'auto'");
        }
    }
    const double conf = cfg.get_double("eval.confidence", 0.9);
    if (conf <= 0 || conf >= 1) throw ConfigError("eval.confidence must be in (0,1)");
    if (cfg.get_int("eval.resamples", 1) < 1) throw ConfigError("eval.resamples must be >= 1");
}

struct StageState {
    fs::path out_dir;
    KvConfig cfg;
    uint64_t chained_hash = 0;
    RunRecord record;
};

std::vector<std::string> stage_keys(const std::string& stage) {
    if (stage == "gen") return {"seed", "gen.", "split."};
    if (stage == "qc") return {"qc."};
    if (stage == "pretrain") return {"pretrain."};
    if (stage == "embed") return {"pretrain.embed_dim"};
    if (stage == "train") return {"train."};
    if (stage == "eval") return {"eval."};
    return {};
}

uint64_t stage_hash(const StageState& st, const std::string& stage) {
    std::string blob = "stage:" + stage + ";prev:" + std::to_string(st.chained_hash) + ";";
    for (const auto& [k, v] : st.cfg.entries())
        for (const auto& prefix : stage_keys(stage))
            if (k == prefix || k.rfind(prefix, 0) == 0) blob += k + "=" + v + ";";
    return fnv1a64(blob.data(), blob.size());
}

// Runs or skips one stage: the stage is skippable when its recorded hash and
// every recorded output digest still match.
template <typename Fn>
void run_stage(StageState& st, const std::string& name,
               const std::vector<fs::path>& outputs, Fn&& fn) {
    const uint64_t hash = stage_hash(st, name);
    st.chained_hash = hash;
    const fs::path state_dir = st.out_dir / ".stage";
    const fs::path state_file = state_dir / (name + ".json");

    StageRecord rec;
    rec.name = name;

    auto relative = [&](const fs::path& p) {
        return fs::relative(p, st.out_dir).generic_string();
    };

    bool can_skip = false;
    if (fs::exists(state_file)) {
        try {
            std::ifstream f(state_file);
            const auto j = nlohmann::json::parse(f);
            if (j.at("hash").get<std::string>() == std::to_string(hash)) {
                can_skip = true;
                for (const auto& out : j.at("outputs")) {
                    const fs::path p = st.out_dir / out.at("path").get<std::string>();
                    if (!fs::exists(p) ||
                        digest_file_hex(p) != out.at("digest").get<std::string>()) {
                        can_skip = false;
                        break;
                    }
                }
                if (can_skip) {
                    for (const auto& out : j.at("outputs"))
                        rec.outputs.emplace_back(out.at("path").get<std::string>(),
                                                 out.at("digest").get<std::string>());
                }
            }
        } catch (const std::exception&) {
            can_skip = false;
        }
    }

    if (can_skip) {
        rec.skipped = true;
        log_line(name, "outputs up to date, skipping");
        st.record.stages.push_back(std::move(rec));
        return;
    }

    log_line(name, "running");
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fn();
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json state;
    state["hash"] = std::to_string(hash);
    state["outputs"] = nlohmann::json::array();
    for (const auto& out : outputs) {
        const std::string rel = relative(out);
        const std::string digest = digest_file_hex(out);
        rec.outputs.emplace_back(rel, digest);
        state["outputs"].push_back({{"path", rel}, {"digest", digest}});
    }
    fs::create_directories(state_dir);
    std::ofstream f(state_file);
    f << state.dump(2) << "\n";
    st.record.stages.push_back(std::move(rec));
}

} // namespace

RunRecord run_pipeline(const KvConfig& user_cfg) {
    const KvConfig cfg = resolve_config(user_cfg);
    validate_config(cfg);

    StageState st;
    st.cfg = cfg;
    st.out_dir = fs::path(cfg.get("out_dir", "run_out"));
    std::error_code ec;
    fs::create_directories(st.out_dir, ec);
    if (ec) throw ConfigError("cannot create out_dir: " + st.out_dir.string());

    const std::string canonical = cfg.serialize();
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical.data(), canonical.size())));
    st.record.config_hash = hex;

    const uint64_t seed = cfg.get_u64("seed", 42);
    const fs::path manifest = st.out_dir / "manifest.jsonl";
    const fs::path qc_dir = st.out_dir / "qc";
    const fs::path encoder = st.out_dir / "encoder.bin";
    const fs::path store = st.out_dir / "embeddings.emb";
    const fs::path model = st.out_dir / "model.bin";
    const fs::path predictions = st.out_dir / "predictions.csv";
    const fs::path eval_dir = st.out_dir / "eval";

    run_stage(st, "gen", {manifest}, [&] {
        GenOptions opt;
        opt.n_specimens = cfg.get_int("gen.n_specimens", 120);
        opt.gen.width = cfg.get_int("gen.width", 512);
        opt.gen.height = cfg.get_int("gen.height", 512);
        opt.gen.panel_size = cfg.get_int("gen.panel_size", 5);
        opt.gen.sigma_c = cfg.get_double("gen.noise", 0.05);
        opt.gen.ink_prob = cfg.get_double("gen.ink_prob", 0.25);
        opt.gen.blur_prob = cfg.get_double("gen.blur_prob", 0.25);
        opt.fractions = {cfg.get_double("split.train", 0.7), cfg.get_double("split.val", 0.15),
                         cfg.get_double("split.test", 0.15)};
        opt.seed = seed;
        opt.out_dir = st.out_dir;
        run_gen(opt);
    });

    run_stage(st, "qc", {qc_dir / "verdicts.csv"}, [&] {
        QcOptions opt;
        opt.manifest = manifest;
        opt.params.min_tissue_fraction = cfg.get_double("qc.min_tissue_fraction", 0.6);
        opt.params.blur_threshold = cfg.get_double("qc.blur_threshold", qc::kDefaultBlurThreshold);
        opt.params.ink_threshold = cfg.get_double("qc.ink_threshold", qc::kDefaultInkThreshold);
        opt.out_dir = qc_dir;
        run_qc(opt);
    });

    run_stage(st, "pretrain", {encoder}, [&] {
        PretrainOptions opt;
        opt.manifest = manifest;
        opt.tiles_dir = qc_dir;
        opt.cfg.tau = cfg.get_double("pretrain.tau", 0.1);
        opt.cfg.batch_size = cfg.get_int("pretrain.batch", 32);
        opt.cfg.lr = cfg.get_double("pretrain.lr", 0.002);
        opt.cfg.momentum = cfg.get_double("pretrain.momentum", 0.9);
        opt.cfg.epochs = cfg.get_int("pretrain.epochs", 10);
        opt.cfg.seed = derive_seed(seed, 2);
        opt.cfg.aug.max_color_jitter = cfg.get_double("pretrain.color_jitter", 0.15);
        opt.cfg.aug.noise_variance = cfg.get_double("pretrain.noise_variance", 0.001);
        const int d = cfg.get_int("pretrain.embed_dim", 64);
        opt.cfg.encoder.blocks = {{std::max(1, d / 8), 2},
                                  {std::max(1, d / 4), 1},
                                  {std::max(1, d / 2), 1},
                                  {d, 1}};
        opt.cfg.encoder.proj_hidden = d;
        opt.cfg.encoder.proj_dim = std::max(1, d / 2);
        opt.out_encoder = encoder;
        opt.out_curve = st.out_dir / "pretrain_curve.csv";
        run_pretrain(opt);
    });

    run_stage(st, "embed", {store}, [&] {
        EmbedOptions opt;
        opt.encoder = encoder;
        opt.tiles_dir = qc_dir;
        opt.out_store = store;
        run_embed(opt);
    });

    run_stage(st, "train", {model, predictions}, [&] {
        TrainOptions opt;
        opt.embeddings = store;
        opt.manifest = manifest;
        opt.cfg.lr = cfg.get_double("train.lr", 0.01);
        opt.cfg.momentum = cfg.get_double("train.momentum", 0.9);
        opt.cfg.epochs = cfg.get_int("train.epochs", 100);
        opt.cfg.dropout_prob = cfg.get_double("train.dropout", 0.2);
        opt.cfg.accumulation = cfg.get_int("train.accum", 8);
        opt.cfg.seed = derive_seed(seed, 3);
        opt.cfg.loss = cfg.get("train.loss", "rmse") == "ce" ? milreg::LossKind::CrossEntropy
                                                             : milreg::LossKind::Rmse;
        const std::string aug = cfg.get("train.augment", "none");
        opt.cfg.augment = aug == "jitter" ? milreg::AugmentMode::Jitter
                          : aug == "reembed" ? milreg::AugmentMode::Reembed
                                             : milreg::AugmentMode::None;
        opt.cfg.jitter_sigma = cfg.get_double("train.jitter_sigma", 0.1);
        opt.out_model = model;
        opt.out_curve = st.out_dir / "train_curve.csv";
        if (opt.cfg.augment == milreg::AugmentMode::Reembed) {
            opt.tiles_dir = qc_dir;
            opt.encoder = encoder;
        }
        run_train(opt);

        PredictOptions pred;
        pred.model = model;
        pred.embeddings = store;
        pred.manifest = manifest;
        pred.out_csv = predictions;
        run_predict(pred);
    });

    run_stage(st, "eval", {eval_dir / "metrics.csv"}, [&] {
        EvalOptions opt;
        opt.predictions = predictions;
        opt.manifest = manifest;
        const std::string gt = cfg.get("eval.gt_threshold", "auto");
        if (gt != "auto") opt.gt_threshold = std::stod(gt);
        opt.resamples = cfg.get_int("eval.resamples", 2000);
        opt.confidence = cfg.get_double("eval.confidence", 0.9);
        opt.seed = derive_seed(seed, 4);
        opt.out_dir = eval_dir;
        opt.embeddings = store;
        run_eval(opt);
    });

    write_run_record(st.record, st.out_dir / "run_record.json");
    return st.record;
}

void write_run_record(const RunRecord& record, const fs::path& path) {
    nlohmann::ordered_json j;
    j["config_hash"] = record.config_hash;
    j["version"] = record.version;
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : record.stages) {
        nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
        for (const auto& [p, d] : s.outputs) outputs.push_back({{"path", p}, {"digest", d}});
        j["stages"].push_back({{"name", s.name},
                               {"skipped", s.skipped},
                               {"seconds", s.seconds},
                               {"outputs", std::move(outputs)}});
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << j.dump(2) << "\n";
}

} // namespace concordia::pipeline
