// Acceptance suite: one pass/fail line per criterion. Returns nonzero if any
// hard gate fails. Soft comparisons print as REPORT lines.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "concordia/features.hpp"
#include "concordia/milreg.hpp"
#include "concordia/pipeline.hpp"
#include "concordia/qc.hpp"
#include "concordia/rng.hpp"
#include "concordia/slidegen.hpp"
#include "concordia/stats.hpp"

using namespace concordia;

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void criterion(int number, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", number, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void report_line(int number, const std::string& name, const std::string& detail) {
    std::printf("REPORT criterion %d: %s (%s)\n", number, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

double grad_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    // coordinates below ~1e-4 sit under the absolute resolving power of
    // central differences (eps*|f|/h rounding noise) and are not scored
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-4});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

template <typename... Args>
std::string fmt(const char* format, Args... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), format, args...);
    return buf;
}

// Central finite differences probed at two step sizes; probes whose two
// estimates disagree straddle a ReLU kink (where central differences are
// invalid) and are skipped. The skip count is capped by the callers.
struct FdProbe {
    double analytic = 0.0;
    double fd = 0.0;
    bool valid = false;
};

FdProbe fd_probe(double& param, const std::function<double()>& loss_of, double analytic) {
    FdProbe probe;
    probe.analytic = analytic;
    const double orig = param;
    auto at = [&](double offset) {
        param = orig + offset;
        const double v = loss_of();
        param = orig;
        return v;
    };
    const double h = 1e-6;
    const double f0 = at(0.0);
    const double f_up = at(h), f_dn = at(-h);
    const double f_up2 = at(h / 2), f_dn2 = at(-h / 2);
    const double fd_h = (f_up - f_dn) / (2 * h);
    const double fd_h2 = (f_up2 - f_dn2) / h;
    probe.fd = fd_h2;
    const double scale = std::max({std::abs(fd_h), std::abs(fd_h2), 1e-6});
    // difference quotients carry ~eps*|f|/h of rounding noise; differences
    // below that floor say nothing about kinks
    const double noise_floor = 64.0 * 2.3e-16 * std::abs(f0) / h;
    // kink inside the stencil: halving the step moves the estimate
    const bool straddle =
        std::abs(fd_h - fd_h2) > std::max(1e-3 * scale, noise_floor);
    // kink at the evaluation point itself (e.g. a pre-activation parked
    // exactly on the ReLU boundary): one-sided differences disagree
    const double fwd = (f_up - f0) / h;
    const double bwd = (f0 - f_dn) / h;
    const bool at_kink = std::abs(fwd - bwd) > std::max(3e-4 * scale, noise_floor);
    probe.valid = !straddle && !at_kink;
    return probe;
}

// shared benchmark artifacts produced by criterion 1 and reused by 6
struct BenchmarkArtifacts {
    fs::path dir;
    bool pipeline_ok = false;
    double test_rmse = 0.0;
    double runtime_seconds = 0.0;
};

constexpr uint64_t kBenchSeed = 20260808;

BenchmarkArtifacts run_benchmark() {
    BenchmarkArtifacts art;
    art.dir = fs::temp_directory_path() / "concordia_acceptance" / "benchmark";
    fs::remove_all(art.dir);

    pipeline::KvConfig cfg = pipeline::default_config();
    cfg.set("out_dir", art.dir.string());
    cfg.set("seed", std::to_string(kBenchSeed));
    // standard synthetic benchmark: 120 specimens, 84/18/18, sigma_c = 0.05,
    // encoder D=64 pretrained 10 epochs, regressor to min-val checkpoint
    cfg.set("gen.n_specimens", "120");
    cfg.set("gen.noise", "0.05");
    cfg.set("pretrain.epochs", "10");
    cfg.set("pretrain.embed_dim", "64");
    cfg.set("eval.gt_threshold", "auto");

    const auto t0 = std::chrono::steady_clock::now();
    pipeline::run_pipeline(cfg);
    art.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const auto rows = stats::read_predictions_csv(art.dir / "predictions.csv");
    std::vector<double> preds, labels;
    for (const auto& r : rows) {
        if (r.split != slidegen::Split::Test) continue;
        preds.push_back(r.prediction);
        labels.push_back(r.label);
    }
    art.test_rmse = milreg::rmse_loss(preds, labels);
    art.pipeline_ok = true;
    return art;
}

// ---------------------------------------------------------------------------
// criterion 2 helpers
// ---------------------------------------------------------------------------

double check_nt_xent_grads(int trials, uint64_t seed) {
    double worst = 0.0;
    Rng shapes(seed);
    for (int trial = 0; trial < trials; ++trial) {
        const int n = 2 + static_cast<int>(shapes.uniform_int(3));
        const int d = 3 + static_cast<int>(shapes.uniform_int(5));
        const double tau = 0.08 + shapes.uniform(0.0, 0.4);
        std::vector<double> proj(static_cast<size_t>(2 * n) * d);
        Rng vals(derive_seed(seed, trial));
        for (auto& x : proj) x = vals.uniform(-1.0, 1.0);
        const auto r = features::nt_xent_loss(proj, 2 * n, d, tau);
        std::vector<double> fd(proj.size());
        const double h = 1e-6;
        for (size_t i = 0; i < proj.size(); ++i) {
            const double orig = proj[i];
            proj[i] = orig + h;
            const double up = features::nt_xent_loss(proj, 2 * n, d, tau).loss;
            proj[i] = orig - h;
            const double dn = features::nt_xent_loss(proj, 2 * n, d, tau).loss;
            proj[i] = orig;
            fd[i] = (up - dn) / (2 * h);
        }
        worst = std::max(worst, grad_rel_err(r.grad, fd));
    }
    return worst;
}

double check_encoder_grads(int trials, uint64_t seed) {
    features::EncoderConfig cfg;
    cfg.input_size = 8;
    cfg.blocks = {{3, 1}, {4, 1}};
    cfg.proj_hidden = 5;
    cfg.proj_dim = 4;
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        auto p = features::init_encoder(cfg, derive_seed(seed, trial));
        std::vector<double> input(static_cast<size_t>(4) * 3 * 8 * 8);
        Rng vals(derive_seed(seed, 1000 + trial));
        for (auto& x : input) x = vals.uniform(0.0, 1.0);
        auto loss_of = [&] {
            std::vector<double> proj;
            features::encoder_forward(p, input, 4, proj, nullptr);
            return features::nt_xent_loss(proj, 4, cfg.proj_dim, 0.2).loss;
        };
        features::ForwardCache cache;
        std::vector<double> proj;
        features::encoder_forward(p, input, 4, proj, &cache);
        const auto nt = features::nt_xent_loss(proj, 4, cfg.proj_dim, 0.2);
        auto grads = features::zero_grads(p);
        features::encoder_backward(p, cache, nt.grad, grads);

        auto params = p.arrays();
        auto grad_arrays = grads.arrays();
        Rng pick(derive_seed(seed, 2000 + trial));
        std::vector<double> analytic, fd;
        int skipped = 0;
        for (size_t a = 0; a < params.size(); ++a) {
            for (int probe = 0; probe < 4; ++probe) {
                if (params[a]->empty()) continue;
                const size_t i = static_cast<size_t>(pick.uniform_int(params[a]->size()));
                const auto r = fd_probe((*params[a])[i], loss_of, (*grad_arrays[a])[i]);
                if (!r.valid) {
                    ++skipped;
                    continue;
                }
                analytic.push_back(r.analytic);
                fd.push_back(r.fd);
            }
        }
        if (skipped * 5 > static_cast<int>(analytic.size())) return 1.0; // too many kinks
        worst = std::max(worst, grad_rel_err(analytic, fd));
    }
    return worst;
}

// attention pooling + FC stack + RMSE loss through the full regressor
double check_regressor_grads(int trials, uint64_t seed) {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        milreg::RegressorConfig cfg;
        cfg.input_dim = 4 + trial % 3;
        cfg.fc_widths = {6, 5};
        cfg.attention_dim = 3;
        auto p = milreg::init_regressor(cfg, derive_seed(seed, trial));

        std::vector<milreg::EmbeddingBag> bags;
        Rng vals(derive_seed(seed, 500 + trial));
        for (int b = 0; b < 3; ++b) {
            milreg::EmbeddingBag bag;
            bag.specimen_id = "g";
            bag.dim = cfg.input_dim;
            bag.count = 2 + b;
            bag.instances.resize(static_cast<size_t>(bag.count) * bag.dim);
            for (auto& x : bag.instances) x = vals.uniform(-1.0, 1.0);
            bag.label = vals.uniform();
            bags.push_back(std::move(bag));
        }
        auto loss_of = [&] {
            double sq = 0.0;
            for (const auto& bag : bags) {
                const double pred =
                    milreg::regressor_forward(p, bag, milreg::Mode::Eval, 0.0, 0, nullptr)[0];
                sq += (pred - bag.label) * (pred - bag.label);
            }
            return std::sqrt(sq / static_cast<double>(bags.size()));
        };
        auto grads = milreg::zero_grads(p);
        const double loss = loss_of();
        if (loss <= 1e-9) continue;
        for (const auto& bag : bags) {
            auto* cache = milreg::new_cache();
            std::unique_ptr<milreg::BagCache, milreg::CacheDeleter> guard(cache);
            const double pred =
                milreg::regressor_forward(p, bag, milreg::Mode::Eval, 0.0, 0, cache)[0];
            const std::vector<double> d{(pred - bag.label) /
                                        (static_cast<double>(bags.size()) * loss)};
            milreg::regressor_backward(p, *cache, d, grads);
        }
        auto params = p.arrays();
        auto grad_arrays = grads.arrays();
        Rng pick(derive_seed(seed, 700 + trial));
        std::vector<double> analytic, fd;
        int skipped = 0;
        for (size_t a = 0; a < params.size(); ++a) {
            for (int probe = 0; probe < 5; ++probe) {
                const size_t i = static_cast<size_t>(pick.uniform_int(params[a]->size()));
                const auto r = fd_probe((*params[a])[i], loss_of, (*grad_arrays[a])[i]);
                if (!r.valid) {
                    ++skipped;
                    continue;
                }
                analytic.push_back(r.analytic);
                fd.push_back(r.fd);
            }
        }
        if (skipped * 5 > static_cast<int>(analytic.size())) return 1.0; // too many kinks
        worst = std::max(worst, grad_rel_err(analytic, fd));
    }
    return worst;
}

double check_rmse_grads(int trials, uint64_t seed) {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        Rng vals(derive_seed(seed, trial));
        const size_t n = 2 + vals.uniform_int(8);
        std::vector<double> preds(n), labels(n);
        for (auto& x : preds) x = vals.uniform(0.0, 1.0);
        for (auto& x : labels) x = vals.uniform(0.0, 1.0);
        const double loss = milreg::rmse_loss(preds, labels);
        if (loss <= 1e-9) continue;
        std::vector<double> analytic(n), fd(n);
        for (size_t i = 0; i < n; ++i)
            analytic[i] = (preds[i] - labels[i]) / (static_cast<double>(n) * loss);
        const double h = 1e-7;
        for (size_t i = 0; i < n; ++i) {
            const double orig = preds[i];
            preds[i] = orig + h;
            const double up = milreg::rmse_loss(preds, labels);
            preds[i] = orig - h;
            const double dn = milreg::rmse_loss(preds, labels);
            preds[i] = orig;
            fd[i] = (up - dn) / (2 * h);
        }
        worst = std::max(worst, grad_rel_err(analytic, fd));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// criterion helpers: oracles copied from the unit suites (kept independent)
// ---------------------------------------------------------------------------

int otsu_oracle(const std::vector<uint64_t>& hist) {
    using u128 = unsigned __int128;
    int best_t = -1;
    u128 best_num = 0, best_den = 1;
    for (int t = 0; t < 256; ++t) {
        uint64_t w0 = 0, s0 = 0, w1 = 0, s1 = 0;
        for (int i = 0; i <= t; ++i) {
            w0 += hist[static_cast<size_t>(i)];
            s0 += hist[static_cast<size_t>(i)] * static_cast<uint64_t>(i);
        }
        for (int i = t + 1; i < 256; ++i) {
            w1 += hist[static_cast<size_t>(i)];
            s1 += hist[static_cast<size_t>(i)] * static_cast<uint64_t>(i);
        }
        if (w0 == 0 || w1 == 0) continue;
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
    }
    return best_t;
}

double auc_pairwise_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    long long concordant = 0, ties = 0, p = 0, n = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        ++p;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            if (scores[i] > scores[j])
                ++concordant;
            else if (scores[i] == scores[j])
                ++ties;
        }
    }
    for (const int l : labels) n += l ? 0 : 1;
    return (static_cast<double>(concordant) + 0.5 * static_cast<double>(ties)) /
           (static_cast<double>(p) * static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

BenchmarkArtifacts criterion_1() {
    BenchmarkArtifacts art;
    std::string detail;
    try {
        art = run_benchmark();
        detail = fmt("test RMSE %.4f <= 0.15; runtime %.0f s", art.test_rmse,
                     art.runtime_seconds);
    } catch (const std::exception& e) {
        detail = std::string("pipeline failed: ") + e.what();
    }
    criterion(1, "end-to-end planted-signal recovery", art.pipeline_ok && art.test_rmse <= 0.15,
              detail);
    return art;
}

void criterion_2() {
    const double nt = check_nt_xent_grads(20, 0xA1);
    const double enc = check_encoder_grads(20, 0xA2);
    const double reg = check_regressor_grads(20, 0xA3);
    const double rmse = check_rmse_grads(20, 0xA4);
    const double worst = std::max({nt, enc, reg, rmse});
    criterion(2, "gradient correctness vs central finite differences", worst < 1e-4,
              fmt("worst relative error %.3g (nt %.2g, encoder %.2g, regressor %.2g, rmse %.2g)",
                  worst, nt, enc, reg, rmse));
}

void criterion_3() {
    // analytic anchor
    bool anchor = true;
    double worst_gap = 0.0;
    for (const int n : {2, 4, 16}) {
        std::vector<double> proj(static_cast<size_t>(2 * n) * 6);
        Rng vals(91);
        std::vector<double> row(6);
        for (auto& x : row) x = vals.uniform(-1.0, 1.0);
        for (int i = 0; i < 2 * n; ++i)
            std::copy(row.begin(), row.end(), proj.begin() + static_cast<size_t>(i) * 6);
        const double loss = features::nt_xent_loss(proj, 2 * n, 6, 0.1).loss;
        const double gap = std::abs(loss - std::log(2.0 * n - 1.0));
        worst_gap = std::max(worst_gap, gap);
        anchor = anchor && gap < 1e-9;
    }

    // training reduction on 2000 synthetic tiles, 10 epochs
    slidegen::GenConfig gcfg;
    gcfg.width = gcfg.height = 128;
    gcfg.tissue_fraction_min = 0.93;
    gcfg.tissue_fraction_max = 0.99;
    gcfg.ink_prob = 0.0;
    gcfg.blur_prob = 0.0;
    std::vector<ImageU8> tiles;
    for (int i = 0; i < 2000; ++i) {
        Rng r(derive_seed(0x7117, 9000 + i));
        tiles.push_back(
            slidegen::generate_specimen("t", r.uniform(), gcfg, derive_seed(0x7117, i))
                .slide.image);
    }
    features::PretrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = 5;
    cfg.encoder.blocks = {{8, 4}, {16, 1}, {32, 1}};
    cfg.encoder.proj_hidden = 32;
    cfg.encoder.proj_dim = 16;
    const auto result = features::train_contrastive(tiles, cfg);
    const double initial = result.curve.train.front();
    const double final_loss = result.curve.train.back();
    const bool reduced = final_loss < 0.8 * initial;

    criterion(3, "NT-Xent analytic anchor and contrastive training progress", anchor && reduced,
              fmt("anchor gap %.1e; train loss %.3f -> %.3f", worst_gap, initial, final_loss));
}

void criterion_4() {
    // corrupted corpus
    slidegen::GenConfig gcfg;
    gcfg.ink_prob = 0.5;
    gcfg.blur_prob = 0.5;
    qc::QcParams params;
    int flagged = 0, flagged_rejected = 0, clean = 0, clean_rejected = 0;
    for (int s = 0; s < 60; ++s) {
        Rng crng(derive_seed(0xACC4, 5000 + s));
        const auto sp = slidegen::generate_specimen("qc", crng.uniform(), gcfg,
                                                    derive_seed(0xACC4, s));
        const auto mask = qc::segment_tissue(sp.slide);
        auto tiles =
            qc::tile_slide(sp.slide, 0, mask, params.tile_size, params.min_tissue_fraction);
        const auto result =
            qc::qc_filter(std::move(tiles), params.blur_threshold, params.ink_threshold);
        for (const auto& v : result.verdicts) {
            size_t ink_px = 0;
            bool fully_blurred = true;
            for (int y = 0; y < params.tile_size; ++y)
                for (int x = 0; x < params.tile_size; ++x) {
                    const int ax = v.grid_x * params.tile_size + x;
                    const int ay = v.grid_y * params.tile_size + y;
                    ink_px += sp.truth.ink[static_cast<size_t>(ay) * sp.truth.width + ax];
                    if (!sp.truth.in_blur(ax, ay)) fully_blurred = false;
                }
            const double ink_frac =
                static_cast<double>(ink_px) / (params.tile_size * params.tile_size);
            if (ink_frac >= 0.05 || fully_blurred) {
                ++flagged;
                flagged_rejected += v.accepted ? 0 : 1;
            } else if (ink_px == 0 && !fully_blurred) {
                ++clean;
                clean_rejected += v.accepted ? 0 : 1;
            }
        }
    }
    const double flagged_rate =
        flagged ? static_cast<double>(flagged_rejected) / flagged : 0.0;
    const double clean_rate = clean ? static_cast<double>(clean_rejected) / clean : 1.0;

    // exact Otsu agreement on 1000 random histograms
    Rng rng(0x015E);
    int checked = 0;
    bool otsu_ok = true;
    while (checked < 1000) {
        std::vector<uint64_t> hist(256, 0);
        const int bins = 2 + static_cast<int>(rng.uniform_int(40));
        for (int b = 0; b < bins; ++b) hist[rng.uniform_int(256)] += rng.uniform_int(2000);
        int distinct = 0;
        for (const auto h : hist) distinct += h > 0 ? 1 : 0;
        if (distinct < 2) continue;
        ++checked;
        if (qc::otsu_threshold(hist) != otsu_oracle(hist)) {
            otsu_ok = false;
            break;
        }
    }

    criterion(4, "QC efficacy and exact Otsu agreement",
              flagged > 20 && flagged_rate >= 0.95 && clean_rate <= 0.05 && otsu_ok,
              fmt("flagged rejected %.1f%% of %d, clean rejected %.2f%% of %d",
                  100 * flagged_rate, flagged, 100 * clean_rate, clean));
}

void criterion_5() {
    // roc_auc vs pairwise oracle, exact
    Rng rng(0x50C1);
    bool auc_exact = true;
    for (int trial = 0; trial < 300 && auc_exact; ++trial) {
        const size_t n = 2 + rng.uniform_int(199);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.uniform_int(10)) / 9.0;
            labels[i] = rng.bernoulli(0.35) ? 1 : 0;
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        auc_exact = stats::roc_auc(scores, labels).auc == auc_pairwise_oracle(scores, labels);
    }

    // precision/recall/specificity vs confusion oracle, exact
    bool pr_exact = true;
    for (int trial = 0; trial < 300 && pr_exact; ++trial) {
        const size_t n = 3 + rng.uniform_int(60);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.uniform_int(8)) / 7.0;
            labels[i] = rng.bernoulli(0.5) ? 1 : 0;
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        const double threshold = rng.uniform();
        const auto got = stats::pr_metrics(scores, labels, threshold);
        long long tp = 0, fp = 0, tn = 0, fn = 0;
        for (size_t i = 0; i < n; ++i) {
            const bool pos = scores[i] >= threshold;
            if (labels[i])
                pos ? ++tp : ++fn;
            else
                pos ? ++fp : ++tn;
        }
        if (tp + fp > 0)
            pr_exact = got.precision_defined &&
                       got.precision == static_cast<double>(tp) / static_cast<double>(tp + fp);
        else
            pr_exact = !got.precision_defined;
        pr_exact = pr_exact &&
                   got.recall == static_cast<double>(tp) / static_cast<double>(tp + fn) &&
                   got.specificity == static_cast<double>(tn) / static_cast<double>(tn + fp);
    }

    // Shapiro-Wilk vs the published reference values
    std::vector<double> royston = {.139, .157, .175,  .256,  .344,  .413,  .503,  .577, .614,
                                   .655, .954, 1.392, 1.557, 1.648, 1.690, 1.994, 2.174, 2.206,
                                   3.245, 3.510, 3.571, 4.354, 4.980, 6.084, 8.351};
    const auto sw = stats::shapiro_wilk(royston);
    const bool sw_ok = std::abs(sw.w - 0.83467) < 1e-3 && std::abs(sw.p - 0.000914) < 1e-3;

    // bootstrap coverage on a known RMSE
    const double true_sigma = 0.1;
    int covered = 0;
    const int runs = 200;
    for (int run = 0; run < runs; ++run) {
        Rng sim(derive_seed(0xC0FE2, run));
        const size_t n = 160;
        std::vector<double> residual(n);
        for (auto& r : residual) r = sim.normal() * true_sigma;
        const auto rmse = [&residual](std::span<const size_t> idx) -> std::optional<double> {
            double acc = 0.0;
            for (const auto i : idx) acc += residual[i] * residual[i];
            return std::sqrt(acc / static_cast<double>(idx.size()));
        };
        const auto ci = stats::bootstrap_ci(rmse, n, 500, 0.90, derive_seed(0xB007, run));
        if (ci.low <= true_sigma && true_sigma <= ci.high) ++covered;
    }
    const bool coverage_ok = covered >= static_cast<int>(0.85 * runs);

    criterion(5, "statistical oracles (AUC, confusion, Shapiro-Wilk, bootstrap coverage)",
              auc_exact && pr_exact && sw_ok && coverage_ok,
              fmt("W %.5f, p %.6f; coverage %.0f/200", sw.w, sw.p,
                  static_cast<double>(covered)));
}

void criterion_6(const BenchmarkArtifacts& art) {
    if (!art.pipeline_ok) {
        criterion(6, "ablation directions", false, "benchmark artifacts unavailable");
        return;
    }
    const auto manifest = slidegen::read_manifest(art.dir / "manifest.jsonl");
    const auto tiles = pipeline::load_accepted_tiles(art.dir / "qc");

    // (a) frozen-random embedder vs the trained contrastive embedder, scored
    // on the same test specimens (those with at least one surviving tile)
    const auto frozen = features::frozen_random_embedder(derive_seed(kBenchSeed, 0xF), 64);
    const auto frozen_store = features::embed_tiles(frozen, tiles);
    auto frozen_bags = milreg::build_bags(frozen_store, manifest);
    milreg::TrainConfig tcfg;
    tcfg.seed = derive_seed(kBenchSeed, 3); // same stream as the pipeline train stage
    const auto frozen_model = milreg::train_regressor(frozen_bags, tcfg);

    std::map<std::string, double> trained_pred;
    for (const auto& r : stats::read_predictions_csv(art.dir / "predictions.csv"))
        trained_pred[r.specimen_id] = r.prediction;
    std::vector<double> fr_preds, tr_preds, fr_labels;
    for (const auto& bag : frozen_bags) {
        if (bag.split != slidegen::Split::Test) continue;
        fr_preds.push_back(milreg::predict_bag(frozen_model.params, bag));
        tr_preds.push_back(trained_pred.at(bag.specimen_id));
        fr_labels.push_back(bag.label);
    }
    const double frozen_rmse = milreg::rmse_loss(fr_preds, fr_labels);
    const double trained_rmse = milreg::rmse_loss(tr_preds, fr_labels);
    const bool ablation_a = trained_rmse < frozen_rmse;
    criterion(6, "trained contrastive embeddings beat the frozen-random embedder", ablation_a,
              fmt("trained RMSE %.4f vs frozen %.4f", trained_rmse, frozen_rmse));

    // (b) regression-as-classifier vs a dedicated binary classifier (soft)
    try {
        const auto rows = stats::read_predictions_csv(art.dir / "predictions.csv");
        std::vector<double> preds, labels;
        for (const auto& r : rows) {
            if (r.split != slidegen::Split::Test) continue;
            preds.push_back(r.prediction);
            labels.push_back(r.label);
        }
        const auto grid = stats::default_threshold_grid(labels);
        const auto search = stats::grid_search_gt_threshold(labels, preds, grid);
        const double t_star = search.best_threshold;

        std::vector<int> y(labels.size());
        for (size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] > t_star ? 1 : 0;
        const double auc_regression = stats::roc_auc(preds, y).auc;

        const auto store = features::read_embedding_store(art.dir / "embeddings.emb");
        auto bags = milreg::build_bags(store, manifest);
        milreg::TrainConfig ccfg;
        ccfg.seed = derive_seed(kBenchSeed, 0xCE);
        const auto classifier = milreg::train_binary_classifier(bags, t_star, ccfg);
        std::vector<double> cls_scores;
        std::vector<int> cls_y;
        for (const auto& bag : bags) {
            if (bag.split != slidegen::Split::Test) continue;
            cls_scores.push_back(milreg::predict_bag(classifier.params, bag));
            cls_y.push_back(bag.label > t_star ? 1 : 0);
        }
        const double auc_binary = stats::roc_auc(cls_scores, cls_y).auc;
        const bool direction = auc_regression >= auc_binary - 0.02;
        report_line(6, direction ? "regression-as-classifier holds up against the binary head"
                                 : "regression-as-classifier UNDERPERFORMS the binary head",
                    fmt("t*=%.2f, regression AUC %.4f vs binary %.4f", t_star, auc_regression,
                        auc_binary));
    } catch (const std::exception& e) {
        report_line(6, "binary-classifier comparison unavailable", e.what());
    }
}

void criterion_7() {
    pipeline::KvConfig base = pipeline::default_config();
    base.set("gen.n_specimens", "24");
    base.set("gen.width", "384");
    base.set("gen.height", "384");
    base.set("qc.min_tissue_fraction", "0.45");
    base.set("split.train", "0.60");
    base.set("split.val", "0.20");
    base.set("split.test", "0.20");
    base.set("pretrain.epochs", "2");
    base.set("pretrain.batch", "8");
    base.set("pretrain.embed_dim", "32");
    base.set("train.epochs", "20");
    base.set("eval.resamples", "200");
    base.set("eval.gt_threshold", "0.5");
    base.set("seed", "1312");

    const fs::path root = fs::temp_directory_path() / "concordia_acceptance";
    auto bytes = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    bool ok = false;
    std::string detail;
    try {
        pipeline::KvConfig cfg_a = base, cfg_b = base;
        cfg_a.set("out_dir", (root / "det_a").string());
        cfg_b.set("out_dir", (root / "det_b").string());
        fs::remove_all(root / "det_a");
        fs::remove_all(root / "det_b");
        pipeline::run_pipeline(cfg_a);
        pipeline::run_pipeline(cfg_b);
        const bool metrics_equal = bytes(root / "det_a" / "eval" / "metrics.csv") ==
                                   bytes(root / "det_b" / "eval" / "metrics.csv");
        const bool stores_equal = bytes(root / "det_a" / "embeddings.emb") ==
                                  bytes(root / "det_b" / "embeddings.emb");
        ok = metrics_equal && stores_equal;
        detail = std::string("metrics.csv ") + (metrics_equal ? "identical" : "DIFFER") +
                 ", embedding store " + (stores_equal ? "identical" : "DIFFER");
    } catch (const std::exception& e) {
        detail = e.what();
    }
    criterion(7, "two identical pipeline runs are byte-identical", ok, detail);
}

void criterion_8() {
    milreg::RegressorConfig cfg;
    cfg.input_dim = 12;
    cfg.fc_widths = {10, 8};
    cfg.attention_dim = 5;
    const auto p = milreg::init_regressor(cfg, 0x313);
    const int m = cfg.fc_widths.back();
    Rng rng(0x817);
    bool ok = true;
    double worst = 0.0;
    for (int trial = 0; trial < 100 && ok; ++trial) {
        const int k = 1 + static_cast<int>(rng.uniform_int(12));
        std::vector<double> h(static_cast<size_t>(k) * m);
        for (auto& x : h) x = rng.uniform(-2.0, 2.0);
        const auto base = milreg::attention_pool(h, k, m, p);

        double sum = 0.0;
        for (const double w : base.weights) sum += w;
        worst = std::max(worst, std::abs(sum - 1.0));
        ok = ok && std::abs(sum - 1.0) < 1e-9;

        std::vector<size_t> perm(static_cast<size_t>(k));
        std::iota(perm.begin(), perm.end(), size_t{0});
        rng.shuffle(perm);
        std::vector<double> hp(h.size());
        for (int i = 0; i < k; ++i)
            std::copy(h.begin() + static_cast<long>(perm[static_cast<size_t>(i)] * m),
                      h.begin() + static_cast<long>((perm[static_cast<size_t>(i)] + 1) * m),
                      hp.begin() + static_cast<long>(static_cast<size_t>(i) * m));
        const auto permuted = milreg::attention_pool(hp, k, m, p);
        std::vector<double> doubled_h;
        doubled_h.insert(doubled_h.end(), h.begin(), h.end());
        doubled_h.insert(doubled_h.end(), h.begin(), h.end());
        const auto doubled = milreg::attention_pool(doubled_h, 2 * k, m, p);
        for (int j = 0; j < m && ok; ++j) {
            const double perm_gap =
                std::abs(permuted.bag[static_cast<size_t>(j)] - base.bag[static_cast<size_t>(j)]);
            const double dup_gap =
                std::abs(doubled.bag[static_cast<size_t>(j)] - base.bag[static_cast<size_t>(j)]);
            worst = std::max({worst, perm_gap, dup_gap});
            ok = ok && perm_gap < 1e-9 && dup_gap < 1e-9;
        }
    }
    criterion(8, "MIL attention invariants on 100 random bags", ok,
              fmt("worst deviation %.2e", worst));
}

} // namespace

int main() {
    std::printf("concordia acceptance suite\n");
    const auto art = criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6(art);
    criterion_7();
    criterion_8();
    std::printf("%s: %d criterion failure(s)\n", g_failures == 0 ? "OK" : "FAILED", g_failures);
    return g_failures == 0 ? 0 : 1;
}
