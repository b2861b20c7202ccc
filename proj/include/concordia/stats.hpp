#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "concordia/slidegen.hpp"

namespace concordia::stats {

struct ConfidenceInterval {
    double low = 0.0;
    double high = 0.0;
    double confidence = 0.90;
    int n_resamples = 0;
    int redraws = 0; // resamples redrawn because the metric was undefined
};

/// e_i = (pred_i - label_i) / sigma, sigma the n-1 sample standard deviation
/// of the raw residuals. The numerator is not mean-centered.
std::vector<double> standardized_residuals(std::span<const double> preds,
                                           std::span<const double> labels);

struct ShapiroResult {
    double w = 0.0;
    double p = 0.0;
};

/// Shapiro-Wilk normality test, Royston's AS R94 approximation (uncensored),
/// valid for 3 <= n <= 5000.
ShapiroResult shapiro_wilk(std::vector<double> samples);

/// Sorted probability-probability pairs: ((i - 0.5)/n, Phi(e_(i))).
std::vector<std::pair<double, double>> pp_points(std::vector<double> e);

double r_squared(std::span<const double> preds, std::span<const double> labels);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocResult {
    std::vector<RocPoint> curve; // staircase from (0,0) to (1,1)
    double auc = 0.0;            // rank statistic with half-credit ties
};

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

struct PrResult {
    double precision = 0.0; // at the operating threshold (score >= threshold)
    bool precision_defined = true;
    double recall = 0.0;
    double specificity = 0.0;
    std::vector<std::pair<double, double>> curve; // (recall, precision) sweep
    double average_precision = 0.0;               // step interpolation
};

PrResult pr_metrics(std::span<const double> scores, std::span<const int> labels, double threshold);

struct GridSearchEntry {
    double threshold = 0.0;
    double auc = 0.0;
    double average_precision = 0.0;
};

struct GridSearchResult {
    double best_threshold = 0.0;
    std::vector<GridSearchEntry> entries; // valid candidates, ascending threshold
};

/// Binarizes ground truth at each candidate (label > t), keeps candidates with
/// both classes present, returns the AUC argmax (smallest t on ties).
GridSearchResult grid_search_gt_threshold(std::span<const double> labels,
                                          std::span<const double> predictions,
                                          std::span<const double> grid);

/// Default candidate grid: 0.05 steps plus the distinct observed labels.
std::vector<double> default_threshold_grid(std::span<const double> labels);

/// Percentile bootstrap over index resamples. The metric may return nullopt
/// (undefined on that resample); such resamples are redrawn deterministically,
/// erroring out when more than half of all draws come back undefined.
ConfidenceInterval bootstrap_ci(
    const std::function<std::optional<double>(std::span<const size_t>)>& metric, size_t n,
    int n_resamples, double confidence, uint64_t seed);

struct GridAssignment {
    int grid_w = 0;
    int grid_h = 0;
    std::vector<int> cell; // per point: cell index gy * grid_w + gx, all distinct
};

/// PCA-to-2D, unit-square normalization, then greedy nearest-cell assignment
/// resolved in distance order.
GridAssignment projection_grid(std::span<const double> embeddings, size_t n, int dim, int grid_w,
                               int grid_h);

struct PredictionRow {
    std::string specimen_id;
    double prediction = 0.0;
    double label = 0.0;
    slidegen::Split split = slidegen::Split::Test;
};

void write_predictions_csv(std::span<const PredictionRow> rows, const std::filesystem::path& path);
std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path);

struct MetricWithCi {
    double value = 0.0;
    bool defined = true;
    ConfidenceInterval ci;
};

struct SiteReport {
    std::string site; // empty = all sites pooled
    size_t n = 0;
    MetricWithCi rmse, r2, auc, average_precision, precision, recall, specificity;
};

struct EvalConfig {
    double gt_threshold = 0.85;
    int n_resamples = 2000;
    double confidence = 0.90;
    uint64_t seed = 0;
};

struct EvalReport {
    EvalConfig cfg;
    std::vector<SiteReport> sites; // [0] is the pooled report
    // residual diagnostics (pooled test set)
    bool diagnostics_available = false;
    std::vector<double> residuals_std;
    double shapiro_w = 0.0, shapiro_p = 0.0;
    std::vector<std::pair<double, double>> pp;
    RocResult roc;
    PrResult pr;
    std::vector<double> preds, labels; // pooled test rows, manifest order
};

/// Test-split evaluation: regression metrics, residual diagnostics, and
/// malignancy classification of the predictions at gt_threshold, all with
/// percentile-bootstrap CIs; stratified per site when the manifest has sites.
EvalReport evaluate(const std::vector<PredictionRow>& predictions,
                    const slidegen::DatasetManifest& manifest, const EvalConfig& cfg);

/// metrics.csv with the header metric,value,ci_low,ci_high,site.
void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path);

} // namespace concordia::stats
