#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "concordia/features.hpp"
#include "concordia/milreg.hpp"
#include "concordia/qc.hpp"
#include "concordia/slidegen.hpp"
#include "concordia/stats.hpp"

namespace concordia::pipeline {

inline constexpr const char* kVersion = "0.1.0";

/// Config-level failure: exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Stage-level failure: exit code 3.
struct StageError : std::runtime_error {
    StageError(std::string stage_name, const std::string& what)
        : std::runtime_error("stage " + stage_name + ": " + what), stage(std::move(stage_name)) {}
    std::string stage;
};

/// Flat `key = value` document with '#' comments; order-preserving, so a
/// parse/serialize round trip of a serialized config is the identity.
class KvConfig {
public:
    static KvConfig parse_file(const std::filesystem::path& path);
    static KvConfig parse_string(const std::string& text);

    std::string serialize() const;
    bool has(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    void set(const std::string& key, const std::string& value);

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

uint64_t fnv1a64(const void* data, size_t size);
std::string digest_file_hex(const std::filesystem::path& path);

void log_line(const std::string& stage, const std::string& message);

// ---------------------------------------------------------------------------
// stages (shared by the CLI subcommands and run_pipeline)
// ---------------------------------------------------------------------------

struct GenOptions {
    int n_specimens = 120;
    slidegen::GenConfig gen;
    std::array<double, 3> fractions = {0.70, 0.15, 0.15};
    uint64_t seed = 42;
    std::filesystem::path out_dir;
};
/// Writes <out>/slides/<id>_0.ppm per specimen plus <out>/manifest.jsonl.
void run_gen(const GenOptions& opt);

struct QcOptions {
    std::filesystem::path manifest;
    qc::QcParams params;
    std::filesystem::path out_dir;
};
/// Writes accepted tiles as PPMs plus verdicts.csv covering every grid cell.
void run_qc(const QcOptions& opt);

std::string tile_filename(const std::string& specimen_id, int slide, int gx, int gy);
std::vector<qc::Tile> load_accepted_tiles(const std::filesystem::path& qc_dir);

struct PretrainOptions {
    std::filesystem::path manifest;
    std::filesystem::path tiles_dir;
    features::PretrainConfig cfg;
    std::filesystem::path out_encoder;
    std::filesystem::path out_curve;
};
/// Contrastive pretraining on train-split tiles only.
void run_pretrain(const PretrainOptions& opt);

struct EmbedOptions {
    std::filesystem::path encoder;
    std::filesystem::path tiles_dir;
    std::filesystem::path out_store;
};
void run_embed(const EmbedOptions& opt);

struct TrainOptions {
    std::filesystem::path embeddings;
    std::filesystem::path manifest;
    milreg::TrainConfig cfg;
    std::filesystem::path out_model;
    std::filesystem::path out_curve;
    // only needed for AugmentMode::Reembed
    std::optional<std::filesystem::path> tiles_dir;
    std::optional<std::filesystem::path> encoder;
};
void run_train(const TrainOptions& opt);

struct PredictOptions {
    std::filesystem::path model;
    std::filesystem::path embeddings;
    std::filesystem::path manifest;
    std::filesystem::path out_csv;
};
void run_predict(const PredictOptions& opt);

struct EvalOptions {
    std::filesystem::path predictions;
    std::filesystem::path manifest;
    std::optional<double> gt_threshold; // nullopt: grid-searched on the test split
    int resamples = 2000;
    double confidence = 0.90;
    uint64_t seed = 0;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> embeddings; // enables grid.svg
};
void run_eval(const EvalOptions& opt);

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

struct StageRecord {
    std::string name;
    bool skipped = false;
    double seconds = 0.0;
    std::vector<std::pair<std::string, std::string>> outputs; // (relative path, digest)
};

struct RunRecord {
    std::string config_hash;
    std::string version = kVersion;
    std::vector<StageRecord> stages;
};

/// Resolves defaults, validates, then runs gen -> qc -> pretrain -> embed ->
/// train -> eval under cfg's out_dir, skipping stages whose recorded config
/// hash and output digests still match. Throws ConfigError / StageError.
RunRecord run_pipeline(const KvConfig& cfg);

void write_run_record(const RunRecord& record, const std::filesystem::path& path);

/// The full default config document (also the reference for every key).
KvConfig default_config();

} // namespace concordia::pipeline
