#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "concordia/image.hpp"
#include "concordia/qc.hpp"
#include "concordia/rng.hpp"

namespace concordia::features {

struct AugmentationConfig {
    double max_color_jitter = 0.15; // brightness / hue / contrast / saturation bound
    double noise_variance = 0.001;  // additive Gaussian, on [0,1]-scaled pixels
    bool rotations = true;          // random right-angle rotation
};

/// Color-jittered, noised, rotated view. Jitters are drawn uniformly in
/// [-max, +max] per property and applied in a fixed order: hue shift and
/// saturation scale (HSV space, hue wraps), then brightness shift and
/// contrast scale around mid-gray, then pixel noise, then rotation.
/// Output clamped to [0,255]. Deterministic given the rng state.
ImageU8 augment(const ImageU8& tile, const AugmentationConfig& cfg, Rng& rng);

struct ConvBlockSpec {
    int out_channels = 0;
    int stride = 1; // conv stride; every block ends with a 2x2 average pool
};

struct EncoderConfig {
    int input_size = 128;
    std::vector<ConvBlockSpec> blocks = {{8, 2}, {16, 1}, {32, 1}, {64, 1}};
    int proj_hidden = 64;
    int proj_dim = 32;

    int embedding_dim() const { return blocks.empty() ? 0 : blocks.back().out_channels; }
};

struct InitRecord {
    std::string scheme = "he_uniform";
    uint64_t seed = 0;
};

struct EncoderParams {
    EncoderConfig cfg;
    InitRecord init;
    std::vector<std::vector<double>> conv_w; // per block: c_out x c_in x 3 x 3
    std::vector<std::vector<double>> conv_b; // per block: c_out
    std::vector<double> p1_w, p1_b;          // proj_hidden x D, proj_hidden
    std::vector<double> p2_w, p2_b;          // proj_dim x proj_hidden, proj_dim

    int embedding_dim() const { return cfg.embedding_dim(); }
    /// All weight arrays in a fixed order (conv blocks, then head).
    std::vector<std::vector<double>*> arrays();
    std::vector<const std::vector<double>*> arrays() const;
};

/// He-uniform initialization, biases zero. Records scheme + seed.
EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed);

/// Untrained frozen encoder for the feature-extractor ablation; the default
/// architecture with channel widths scaled so the embedding is D wide.
EncoderParams frozen_random_embedder(uint64_t seed, int embedding_dim);

struct ForwardCache {
    int n = 0;
    std::vector<std::vector<double>> block_inputs; // n_blocks+1 entries; last = GAP input
    std::vector<std::vector<double>> conv_pre;     // pre-activation per block
    std::vector<double> gap_out;                   // n x D
    std::vector<double> p1_pre;                    // n x proj_hidden
    std::vector<double> p1_act;
};

/// Full forward to the projection head output (n x proj_dim). Input is
/// n x 3 x S x S, [0,1] scaled. The cache suffices for exact backprop.
void encoder_forward(const EncoderParams& p, std::span<const double> batch, int n,
                     std::vector<double>& projections, ForwardCache* cache);

/// Backbone output before the projection head (n x D): the embedding.
void encoder_embed_forward(const EncoderParams& p, std::span<const double> batch, int n,
                           std::vector<double>& embeddings);

struct EncoderGrads {
    std::vector<std::vector<double>> conv_w, conv_b;
    std::vector<double> p1_w, p1_b, p2_w, p2_b;
    std::vector<std::vector<double>*> arrays();
};

EncoderGrads zero_grads(const EncoderParams& p);

/// Backprop of d_projections (n x proj_dim) through head and blocks.
void encoder_backward(const EncoderParams& p, const ForwardCache& cache,
                      std::span<const double> d_proj, EncoderGrads& grads);

struct NtXentResult {
    double loss = 0.0;
    std::vector<double> grad; // w.r.t. the raw (unnormalized) projections
};

/// NT-Xent over 2N views where rows i and i+N are positive pairs. Rows are
/// L2-normalized internally; similarities are cosine / tau; each view's
/// cross-entropy runs over the 2N-1 candidates excluding itself.
NtXentResult nt_xent_loss(std::span<const double> projections, int two_n, int dim, double tau);

struct PretrainConfig {
    double tau = 0.1;
    int batch_size = 32; // 128 at full scale; 32 fits desk-scale corpora
    double lr = 0.002; // 0.001 stalls on desk-scale corpora
    double momentum = 0.9;
    int epochs = 10;
    uint64_t seed = 0;
    AugmentationConfig aug;
    EncoderConfig encoder;
};

struct LossCurve {
    std::vector<double> train;
    std::vector<double> val;
};

struct PretrainResult {
    EncoderParams params;
    LossCurve curve;
};

/// SGD-with-momentum NT-Xent training on an 80/20 tile split. Deterministic
/// given the seed: batch order, augmentations and updates all derive from it.
PretrainResult train_contrastive(const std::vector<ImageU8>& tiles, const PretrainConfig& cfg);

struct EmbeddingRecord {
    std::string specimen_id;
    uint32_t grid_x = 0;
    uint32_t grid_y = 0;
    std::vector<float> vec;
};

struct EmbeddingStore {
    uint32_t version = 1;
    uint32_t dim = 0;
    std::vector<EmbeddingRecord> records;
};

/// Embeds tiles with the backbone (pre-projection-head). Output order matches
/// input order and is independent of any internal batching.
EmbeddingStore embed_tiles(const EncoderParams& p, const std::vector<qc::Tile>& tiles);

// "EMB1" header, little-endian payload
void write_embedding_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore read_embedding_store(const std::filesystem::path& path);

void save_encoder(const EncoderParams& p, const std::filesystem::path& path);
EncoderParams load_encoder(const std::filesystem::path& path);

/// n x 3 x S x S buffer slot filled from one tile, [0,1] scale.
void tile_to_input(const ImageU8& tile, std::span<double> dst);

} // namespace concordia::features
