#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "concordia/features.hpp"
#include "concordia/slidegen.hpp"

namespace concordia::milreg {

/// One specimen's worth of tile embeddings plus its label: the MIL unit.
struct EmbeddingBag {
    std::string specimen_id;
    int dim = 0;
    int count = 0;
    std::vector<double> instances; // count x dim
    double label = 0.0;
    slidegen::Split split = slidegen::Split::Train;
};

/// Groups store records per specimen using manifest labels/splits. Specimens
/// with no surviving tiles are skipped (the caller sees them missing).
std::vector<EmbeddingBag> build_bags(const features::EmbeddingStore& store,
                                     const slidegen::DatasetManifest& manifest);

enum class LossKind { Rmse, CrossEntropy };
enum class AugmentMode { None, Jitter, Reembed };

struct RegressorConfig {
    int input_dim = 64;
    std::vector<int> fc_widths = {128, 128, 64, 64}; // full-scale 1024/1024/512/512 over 8
    int attention_dim = 32;
    bool gated_attention = true; // tanh (.) sigmoid scoring; plain tanh when false
    int output_dim = 1;          // 1 = regression, 2 = binary logits
};

struct RegressorParams {
    RegressorConfig cfg;
    features::InitRecord init;
    // per-dimension input standardization, fitted on the train split and
    // frozen into the model (identity until trained)
    std::vector<double> input_mean, input_scale;
    std::vector<std::vector<double>> fc_w, fc_b;
    std::vector<double> att_v; // attention_dim x last_width
    std::vector<double> att_u; // gate, same shape
    std::vector<double> att_w; // attention_dim
    std::vector<double> head_w, head_b;

    /// Trainable weight arrays only (standardization excluded).
    std::vector<std::vector<double>*> arrays();
    std::vector<const std::vector<double>*> arrays() const;
};

RegressorParams init_regressor(const RegressorConfig& cfg, uint64_t seed);

struct AttentionResult {
    std::vector<double> bag;     // pooled feature, last_width
    std::vector<double> weights; // k, nonnegative, sums to 1
};

/// Gated attention pooling: score_k = w^T (tanh(V h_k) . sigmoid(U h_k)),
/// weights = softmax(scores), bag = sum_k a_k h_k.
AttentionResult attention_pool(std::span<const double> instances, int k, int dim,
                               const RegressorParams& p);

enum class Mode { Train, Eval };

struct BagCache; // opaque; defined in the .cpp

/// Raw (unclamped) model output for one bag. Train mode applies inverted
/// dropout with streams drawn from dropout_seed; eval mode is a pure function
/// of (params, bag). Returns logits for output_dim == 2.
std::vector<double> regressor_forward(const RegressorParams& p, const EmbeddingBag& bag, Mode mode,
                                      double dropout_prob, uint64_t dropout_seed, BagCache* cache);

struct RegressorGrads {
    std::vector<std::vector<double>> fc_w, fc_b;
    std::vector<double> att_v, att_u, att_w, head_w, head_b;
    std::vector<std::vector<double>*> arrays();
};

RegressorGrads zero_grads(const RegressorParams& p);

/// Accumulates gradients for d_output (the loss gradient at the raw output).
void regressor_backward(const RegressorParams& p, const BagCache& cache,
                        std::span<const double> d_output, RegressorGrads& grads);

BagCache* new_cache();
void free_cache(BagCache* cache);

struct CacheDeleter {
    void operator()(BagCache* c) const { free_cache(c); }
};

double rmse_loss(std::span<const double> preds, std::span<const double> labels);

/// Prediction for reporting: forward in eval mode, clamped to [0,1] for the
/// regression head; probability of the positive class for the binary head.
double predict_bag(const RegressorParams& p, const EmbeddingBag& bag);

struct TrainConfig {
    double dropout_prob = 0.2;
    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 100;
    int accumulation = 8; // bags per update; loss is RMSE over the group
    uint64_t seed = 0;
    LossKind loss = LossKind::Rmse;
    AugmentMode augment = AugmentMode::None;
    double jitter_sigma = 0.1;      // in units of per-dimension train std
    double binary_threshold = 0.85; // ground-truth binarization for CE loss
    RegressorConfig regressor;
};

/// Optional re-embedding provider for AugmentMode::Reembed: returns a freshly
/// augmented+embedded copy of the bag for the given epoch stream.
using ReembedFn = std::function<EmbeddingBag(const EmbeddingBag&, uint64_t epoch_seed)>;

struct TrainResult {
    RegressorParams params; // min-validation checkpoint
    features::LossCurve curve;
    int best_epoch = -1;
};

/// Per-bag SGD (momentum, accumulation groups) on train-split bags with the
/// min-val-RMSE (or min-val-CE) checkpoint returned. Deterministic given seed.
TrainResult train_regressor(const std::vector<EmbeddingBag>& bags, const TrainConfig& cfg,
                            const ReembedFn& reembed = nullptr);

/// Binary-classifier ablation: same stack with a 2-logit head and CE loss on
/// label > threshold. Errors when the binarized train split is single-class.
TrainResult train_binary_classifier(const std::vector<EmbeddingBag>& bags, double threshold,
                                    TrainConfig cfg);

void save_regressor(const RegressorParams& p, const std::filesystem::path& path);
RegressorParams load_regressor(const std::filesystem::path& path);

} // namespace concordia::milreg
