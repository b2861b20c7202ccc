#include "concordia/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "concordia/parallel.hpp"
#include "concordia/rng.hpp"

namespace concordia::stats {

std::vector<double> standardized_residuals(std::span<const double> preds,
                                           std::span<const double> labels) {
    if (preds.size() != labels.size()) throw std::invalid_argument("length mismatch");
    const size_t n = preds.size();
    if (n < 2) throw std::invalid_argument("need at least 2 points");
    std::vector<double> r(n);
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
        r[i] = preds[i] - labels[i];
        mean += r[i];
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (const double v : r) ss += (v - mean) * (v - mean);
    const double sigma = std::sqrt(ss / static_cast<double>(n - 1));
    if (sigma <= 0.0) throw std::runtime_error("constant residuals");
    for (auto& v : r) v /= sigma;
    return r;
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk, AS R94 (Royston 1995), uncensored samples, double precision
// ---------------------------------------------------------------------------

namespace {

double poly(const double* c, int nord, double x) {
    double out = c[0];
    if (nord == 1) return out;
    double p = x * c[nord - 1];
    for (int j = nord - 2; j >= 1; --j) p = (p + c[j]) * x;
    return out + p;
}

// AS 111 normal quantile
double ppnd(double prob) {
    constexpr double split = 0.42;
    constexpr double a0 = 2.50662823884, a1 = -18.61500062529, a2 = 41.39119773534,
                     a3 = -25.44106049637;
    constexpr double b1 = -8.47351093090, b2 = 23.08336743743, b3 = -21.06224101826,
                     b4 = 3.13082909833;
    constexpr double c0 = -2.78718931138, c1 = -2.29796479134, c2 = 4.85014127135,
                     c3 = 2.32121276858;
    constexpr double d1 = 3.54388924762, d2 = 1.63706781897;
    const double q = prob - 0.5;
    if (std::abs(q) <= split) {
        const double r = q * q;
        return q * (((a3 * r + a2) * r + a1) * r + a0) /
               ((((b4 * r + b3) * r + b2) * r + b1) * r + 1.0);
    }
    double r = prob;
    if (q > 0.0) r = 1.0 - prob;
    if (r <= 0.0) return q < 0.0 ? -99.9999 : 99.9999;
    r = std::sqrt(-std::log(r));
    const double v = (((c3 * r + c2) * r + c1) * r + c0) / ((d2 * r + d1) * r + 1.0);
    return q < 0.0 ? -v : v;
}

// upper-tail standard normal area (Adams 1969, as used by AS R94)
double alnorm_upper(double z) {
    constexpr double split = 1.28, tiny = 1e-38;
    constexpr double a0 = 3.98942280444e-1, a1 = -3.99903438504e-1, a2 = 5.75885480458,
                     a3 = -2.98213557808e1, a4 = 2.62433121679, a5 = 4.86959930692e1,
                     a6 = 5.92885724438, a7 = 3.98942280385e-1;
    constexpr double b0 = -3.8052e-8, b1 = 1.00000615302, b2 = 3.98064794e-4,
                     b3 = 1.98615381364, b4 = -1.51679116635e-1, b5 = 5.29330324926,
                     b6 = 4.8385912808, b7 = -1.51508972451e1, b8 = 7.42380924027e-1,
                     b9 = 3.0789933034e1, b10 = 3.99019417011;
    if (z == 0.0) return 0.5;
    if (std::abs(z) >= 13.0) return z > 0.0 ? 0.0 : 1.0;
    const bool negative = z < 0.0;
    const double x = negative ? -z : z;
    const double y = 0.5 * x * x;
    double t;
    if (x < split) {
        t = 0.5 - x * (a0 + a1 * y / (y + a2 + a3 / (y + a4 + a5 / (y + a6))));
    } else {
        const double e = a7 * std::exp(-y);
        if (std::abs(e / x) <= tiny)
            t = 0.0;
        else
            t = e / (x + b0 +
                     b1 / (x + b2 +
                           b3 / (x + b4 + b5 / (x + b6 + b7 / (x + b8 + b9 / (x + b10))))));
    }
    return negative ? 1.0 - t : t;
}

} // namespace

ShapiroResult shapiro_wilk(std::vector<double> x) {
    const int n = static_cast<int>(x.size());
    if (n < 3 || n > 5000)
        throw std::invalid_argument("sample size out of range [3,5000]");
    std::sort(x.begin(), x.end());
    const double range = x.back() - x.front();
    if (range < 1e-19) throw std::runtime_error("all-equal samples");

    constexpr double c1[6] = {0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056};
    constexpr double c2[6] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
    constexpr double c3[4] = {0.5440, -0.39978, 0.025054, -6.714e-4};
    constexpr double c4[4] = {1.3822, -0.77857, 0.062767, -0.0020322};
    constexpr double c5[4] = {-1.5861, -0.31082, -0.083751, 0.0038915};
    constexpr double c6[3] = {-0.4803, -0.082676, 0.0030302};
    constexpr double g[2] = {-2.273, 0.459};
    constexpr double pi6 = 1.909859, stqr = 1.047198;

    const double an = n;
    const int n2 = n / 2;
    std::vector<double> a(static_cast<size_t>(n2));
    if (n == 3) {
        a[0] = std::sqrt(0.5);
    } else {
        const double an25 = an + 0.25;
        double summ2 = 0.0;
        for (int i = 1; i <= n2; ++i) {
            a[static_cast<size_t>(i - 1)] = ppnd((i - 0.375) / an25);
            summ2 += a[static_cast<size_t>(i - 1)] * a[static_cast<size_t>(i - 1)];
        }
        summ2 *= 2.0;
        const double ssumm2 = std::sqrt(summ2);
        const double rsn = 1.0 / std::sqrt(an);
        const double a1 = poly(c1, 6, rsn) - a[0] / ssumm2;
        int i1;
        double fac;
        if (n > 5) {
            i1 = 3;
            const double a2 = -a[1] / ssumm2 + poly(c2, 6, rsn);
            fac = std::sqrt((summ2 - 2.0 * a[0] * a[0] - 2.0 * a[1] * a[1]) /
                            (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
            a[0] = a1;
            a[1] = a2;
        } else {
            i1 = 2;
            fac = std::sqrt((summ2 - 2.0 * a[0] * a[0]) / (1.0 - 2.0 * a1 * a1));
            a[0] = a1;
        }
        for (int i = i1; i <= n2; ++i) a[static_cast<size_t>(i - 1)] /= -fac;
    }

    // W as the squared correlation between the data and the coefficients,
    // evaluated on range-scaled values (1-based walk as in the original)
    auto A = [&a](int i) { return a[static_cast<size_t>(i - 1)]; };
    auto X = [&x](int i) { return x[static_cast<size_t>(i - 1)]; };
    auto sign1 = [](int k) { return k >= 0 ? 1.0 : -1.0; };

    double sx = X(1) / range;
    double sa = -A(1);
    {
        int j = n - 1;
        for (int i = 2; i <= n; ++i) {
            sx += X(i) / range;
            if (i != j) sa += sign1(i - j) * A(std::min(i, j));
            --j;
        }
    }
    sa /= n;
    sx /= n;
    double ssa = 0.0, ssx = 0.0, sax = 0.0;
    {
        int j = n;
        for (int i = 1; i <= n; ++i) {
            const double asa = (i != j ? sign1(i - j) * A(std::min(i, j)) : 0.0) - sa;
            const double xsx = X(i) / range - sx;
            ssa += asa * asa;
            ssx += xsx * xsx;
            sax += asa * xsx;
            --j;
        }
    }
    const double ssassx = std::sqrt(ssa * ssx);
    const double w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    const double w = 1.0 - w1;

    ShapiroResult out;
    out.w = w;
    if (n == 3) {
        out.p = std::clamp(pi6 * (std::asin(std::sqrt(w)) - stqr), 0.0, 1.0);
        return out;
    }
    const double y0 = std::log(w1);
    const double xx = std::log(an);
    double m, s;
    if (n <= 11) {
        const double gamma = poly(g, 2, an);
        if (y0 >= gamma) {
            out.p = 1e-19;
            return out;
        }
        const double y = -std::log(gamma - y0);
        m = poly(c3, 4, an);
        s = std::exp(poly(c4, 4, an));
        out.p = alnorm_upper((y - m) / s);
        return out;
    }
    m = poly(c5, 4, xx);
    s = std::exp(poly(c6, 3, xx));
    out.p = alnorm_upper((y0 - m) / s);
    return out;
}

std::vector<std::pair<double, double>> pp_points(std::vector<double> e) {
    if (e.empty()) throw std::invalid_argument("empty sample");
    std::sort(e.begin(), e.end());
    std::vector<std::pair<double, double>> out(e.size());
    const double n = static_cast<double>(e.size());
    for (size_t i = 0; i < e.size(); ++i) {
        const double f_emp = (static_cast<double>(i) + 0.5) / n;
        const double f_norm = 0.5 * std::erfc(-e[i] / std::sqrt(2.0));
        out[i] = {f_emp, f_norm};
    }
    return out;
}

double r_squared(std::span<const double> preds, std::span<const double> labels) {
    if (preds.size() != labels.size()) throw std::invalid_argument("length mismatch");
    if (preds.size() < 2) throw std::invalid_argument("need at least 2 points");
    double mean = 0.0;
    for (const double y : labels) mean += y;
    mean /= static_cast<double>(labels.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        ss_res += (preds[i] - labels[i]) * (preds[i] - labels[i]);
        ss_tot += (labels[i] - mean) * (labels[i] - mean);
    }
    if (ss_tot <= 0.0) throw std::runtime_error("constant labels");
    return 1.0 - ss_res / ss_tot;
}

namespace {

// Descending-score index order with positives/negatives counted.
struct Sweep {
    std::vector<size_t> order;
    long long p = 0, n = 0;
};

Sweep make_sweep(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("length mismatch");
    Sweep s;
    s.order.resize(scores.size());
    std::iota(s.order.begin(), s.order.end(), size_t{0});
    std::stable_sort(s.order.begin(), s.order.end(),
                     [&scores](size_t a, size_t b) { return scores[a] > scores[b]; });
    for (const int l : labels) (l ? s.p : s.n)++;
    if (s.p == 0 || s.n == 0) throw std::invalid_argument("single-class input");
    return s;
}

} // namespace

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
    const Sweep s = make_sweep(scores, labels);
    RocResult out;
    out.curve.push_back({0.0, 0.0});
    long long concordant = 0, ties = 0;
    long long tp = 0, fp = 0;
    size_t i = 0;
    while (i < s.order.size()) {
        size_t j = i;
        long long p_grp = 0, q_grp = 0;
        while (j < s.order.size() && scores[s.order[j]] == scores[s.order[i]]) {
            (labels[s.order[j]] ? p_grp : q_grp)++;
            ++j;
        }
        // negatives strictly below this score group
        concordant += p_grp * (s.n - fp - q_grp);
        ties += p_grp * q_grp;
        tp += p_grp;
        fp += q_grp;
        out.curve.push_back({static_cast<double>(fp) / static_cast<double>(s.n),
                             static_cast<double>(tp) / static_cast<double>(s.p)});
        i = j;
    }
    out.auc = (static_cast<double>(concordant) + 0.5 * static_cast<double>(ties)) /
              (static_cast<double>(s.p) * static_cast<double>(s.n));
    return out;
}

PrResult pr_metrics(std::span<const double> scores, std::span<const int> labels,
                    double threshold) {
    const Sweep s = make_sweep(scores, labels);
    PrResult out;

    long long tp = 0, fp = 0, tn = 0, fn = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool pred_pos = scores[i] >= threshold;
        if (labels[i]) (pred_pos ? tp : fn)++;
        else (pred_pos ? fp : tn)++;
    }
    out.precision_defined = tp + fp > 0;
    out.precision = out.precision_defined
                        ? static_cast<double>(tp) / static_cast<double>(tp + fp)
                        : std::numeric_limits<double>::quiet_NaN();
    out.recall = static_cast<double>(tp) / static_cast<double>(s.p);
    out.specificity = static_cast<double>(tn) / static_cast<double>(s.n);

    // descending sweep with step interpolation
    long long tp_cum = 0, fp_cum = 0;
    double prev_recall = 0.0, ap = 0.0;
    size_t i = 0;
    while (i < s.order.size()) {
        size_t j = i;
        while (j < s.order.size() && scores[s.order[j]] == scores[s.order[i]]) {
            (labels[s.order[j]] ? tp_cum : fp_cum)++;
            ++j;
        }
        const double recall = static_cast<double>(tp_cum) / static_cast<double>(s.p);
        const double precision =
            static_cast<double>(tp_cum) / static_cast<double>(tp_cum + fp_cum);
        ap += (recall - prev_recall) * precision;
        out.curve.push_back({recall, precision});
        prev_recall = recall;
        i = j;
    }
    out.average_precision = ap;
    return out;
}

GridSearchResult grid_search_gt_threshold(std::span<const double> labels,
                                          std::span<const double> predictions,
                                          std::span<const double> grid) {
    if (grid.empty()) throw std::invalid_argument("empty threshold grid");
    if (labels.size() != predictions.size()) throw std::invalid_argument("length mismatch");
    std::vector<double> candidates(grid.begin(), grid.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    GridSearchResult out;
    double best_auc = -1.0;
    bool found = false;
    for (const double t : candidates) {
        std::vector<int> y(labels.size());
        long long pos = 0;
        for (size_t i = 0; i < labels.size(); ++i) {
            y[i] = labels[i] > t ? 1 : 0;
            pos += y[i];
        }
        if (pos == 0 || pos == static_cast<long long>(labels.size())) continue;
        const double auc = roc_auc(predictions, y).auc;
        const double ap = pr_metrics(predictions, y, t).average_precision;
        out.entries.push_back({t, auc, ap});
        if (!found || auc > best_auc) {
            found = true;
            best_auc = auc;
            out.best_threshold = t;
        }
    }
    if (!found) throw std::runtime_error("no valid threshold candidate");
    return out;
}

std::vector<double> default_threshold_grid(std::span<const double> labels) {
    std::set<double> grid;
    for (int i = 1; i <= 19; ++i) grid.insert(i * 0.05);
    for (const double l : labels) grid.insert(l);
    return {grid.begin(), grid.end()};
}

ConfidenceInterval bootstrap_ci(
    const std::function<std::optional<double>(std::span<const size_t>)>& metric, size_t n,
    int n_resamples, double confidence, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample size must be >= 1");
    if (n_resamples < 1) throw std::invalid_argument("n_resamples must be >= 1");
    if (confidence <= 0.0 || confidence >= 1.0)
        throw std::invalid_argument("confidence must be in (0,1)");

    constexpr int kMaxAttempts = 64;
    std::vector<double> values(static_cast<size_t>(n_resamples));
    std::vector<int> attempts_used(static_cast<size_t>(n_resamples), 0);

#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (int r = 0; r < n_resamples; ++r) {
        std::vector<size_t> idx(n);
        for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
            Rng rng(derive_seed(seed, static_cast<uint64_t>(r) * kMaxAttempts +
                                          static_cast<uint64_t>(attempt)));
            for (auto& v : idx) v = static_cast<size_t>(rng.uniform_int(n));
            const auto m = metric(idx);
            if (m.has_value()) {
                values[static_cast<size_t>(r)] = *m;
                attempts_used[static_cast<size_t>(r)] = attempt + 1;
                break;
            }
        }
    }

    int redraws = 0;
    for (int r = 0; r < n_resamples; ++r) {
        if (attempts_used[static_cast<size_t>(r)] == 0)
            throw std::runtime_error("metric undefined on too many resamples");
        redraws += attempts_used[static_cast<size_t>(r)] - 1;
    }
    if (redraws > n_resamples)
        throw std::runtime_error("metric undefined on too many resamples");

    std::sort(values.begin(), values.end());
    const double q_lo = (1.0 - confidence) / 2.0;
    const double q_hi = 1.0 - q_lo;
    auto order_stat = [&values](double q) {
        const auto last = static_cast<double>(values.size() - 1);
        const auto k = static_cast<long long>(std::llround(q * last));
        return values[static_cast<size_t>(std::clamp<long long>(
            k, 0, static_cast<long long>(values.size()) - 1))];
    };
    ConfidenceInterval ci;
    ci.low = order_stat(q_lo);
    ci.high = order_stat(q_hi);
    ci.confidence = confidence;
    ci.n_resamples = n_resamples;
    ci.redraws = redraws;
    return ci;
}

// ---------------------------------------------------------------------------
// projection grid
// ---------------------------------------------------------------------------

namespace {

// top principal direction by power iteration on the implicit covariance;
// `against` deflates when computing the second component
std::vector<double> power_component(const std::vector<double>& centered, size_t n, int dim,
                                    const std::vector<double>* against, uint64_t seed) {
    std::vector<double> v(static_cast<size_t>(dim));
    Rng rng(derive_seed(seed, 0x9CA));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    auto orthonormalize = [&](std::vector<double>& w) {
        if (against) {
            double d = 0.0;
            for (int k = 0; k < dim; ++k) d += w[static_cast<size_t>(k)] * (*against)[static_cast<size_t>(k)];
            for (int k = 0; k < dim; ++k) w[static_cast<size_t>(k)] -= d * (*against)[static_cast<size_t>(k)];
        }
        double nrm = 0.0;
        for (const double x : w) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm < 1e-300) {
            std::fill(w.begin(), w.end(), 0.0);
            return false;
        }
        for (auto& x : w) x /= nrm;
        return true;
    };
    if (!orthonormalize(v)) return v;
    std::vector<double> proj(n), next(static_cast<size_t>(dim));
    for (int iter = 0; iter < 128; ++iter) {
        for (size_t i = 0; i < n; ++i) {
            const double* row = centered.data() + i * static_cast<size_t>(dim);
            double d = 0.0;
            for (int k = 0; k < dim; ++k) d += row[k] * v[static_cast<size_t>(k)];
            proj[i] = d;
        }
        std::fill(next.begin(), next.end(), 0.0);
        for (size_t i = 0; i < n; ++i) {
            const double* row = centered.data() + i * static_cast<size_t>(dim);
            for (int k = 0; k < dim; ++k) next[static_cast<size_t>(k)] += proj[i] * row[k];
        }
        if (!orthonormalize(next)) {
            std::fill(v.begin(), v.end(), 0.0);
            return v;
        }
        v = next;
    }
    return v;
}

} // namespace

GridAssignment projection_grid(std::span<const double> embeddings, size_t n, int dim, int grid_w,
                               int grid_h) {
    if (grid_w < 1 || grid_h < 1) throw std::invalid_argument("grid must be at least 1x1");
    if (n > static_cast<size_t>(grid_w) * static_cast<size_t>(grid_h))
        throw std::invalid_argument("more points than grid cells");
    if (embeddings.size() != n * static_cast<size_t>(dim))
        throw std::invalid_argument("embedding shape mismatch");

    GridAssignment out;
    out.grid_w = grid_w;
    out.grid_h = grid_h;
    out.cell.assign(n, -1);
    if (n == 0) return out;

    std::vector<double> centered(embeddings.begin(), embeddings.end());
    for (int k = 0; k < dim; ++k) {
        double mean = 0.0;
        for (size_t i = 0; i < n; ++i) mean += centered[i * static_cast<size_t>(dim) + k];
        mean /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) centered[i * static_cast<size_t>(dim) + k] -= mean;
    }
    const auto pc1 = power_component(centered, n, dim, nullptr, 1);
    const auto pc2 = power_component(centered, n, dim, &pc1, 2);

    std::vector<double> xs(n), ys(n);
    for (size_t i = 0; i < n; ++i) {
        const double* row = centered.data() + i * static_cast<size_t>(dim);
        double x = 0.0, y = 0.0;
        for (int k = 0; k < dim; ++k) {
            x += row[k] * pc1[static_cast<size_t>(k)];
            y += row[k] * pc2[static_cast<size_t>(k)];
        }
        xs[i] = x;
        ys[i] = y;
    }
    auto normalize = [](std::vector<double>& v) {
        const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
        const double lo = *mn, hi = *mx;
        if (hi - lo < 1e-12) {
            std::fill(v.begin(), v.end(), 0.5);
            return;
        }
        for (auto& x : v) x = (x - lo) / (hi - lo);
    };
    normalize(xs);
    normalize(ys);

    // greedy nearest-free-cell, conflicts resolved in distance order
    const int cells = grid_w * grid_h;
    auto cell_dist2 = [&](size_t pt, int cell) {
        const double cx = (cell % grid_w + 0.5) / grid_w;
        const double cy = (cell / grid_w + 0.5) / grid_h;
        return (xs[pt] - cx) * (xs[pt] - cx) + (ys[pt] - cy) * (ys[pt] - cy);
    };
    std::vector<std::vector<int>> ranked(n);
    for (size_t i = 0; i < n; ++i) {
        ranked[i].resize(static_cast<size_t>(cells));
        std::iota(ranked[i].begin(), ranked[i].end(), 0);
        std::sort(ranked[i].begin(), ranked[i].end(), [&](int a, int b) {
            const double da = cell_dist2(i, a), db = cell_dist2(i, b);
            return da != db ? da < db : a < b;
        });
    }
    struct Entry {
        double dist;
        size_t point;
        size_t rank;
        bool operator>(const Entry& o) const {
            if (dist != o.dist) return dist > o.dist;
            return point > o.point;
        }
    };
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> pq;
    for (size_t i = 0; i < n; ++i) pq.push({cell_dist2(i, ranked[i][0]), i, 0});
    std::vector<uint8_t> taken(static_cast<size_t>(cells), 0);
    size_t assigned = 0;
    while (assigned < n) {
        Entry e = pq.top();
        pq.pop();
        const int cell = ranked[e.point][e.rank];
        if (taken[static_cast<size_t>(cell)]) {
            size_t r = e.rank + 1;
            while (taken[static_cast<size_t>(ranked[e.point][r])]) ++r;
            pq.push({cell_dist2(e.point, ranked[e.point][r]), e.point, r});
            continue;
        }
        taken[static_cast<size_t>(cell)] = 1;
        out.cell[e.point] = cell;
        ++assigned;
    }
    return out;
}

// ---------------------------------------------------------------------------
// predictions.csv
// ---------------------------------------------------------------------------

void write_predictions_csv(std::span<const PredictionRow> rows,
                           const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "specimen_id,prediction,label,split\n";
    char buf[160];
    for (const auto& r : rows) {
        if (r.specimen_id.find(',') != std::string::npos)
            throw std::invalid_argument("specimen_id must not contain commas");
        std::snprintf(buf, sizeof(buf), "%s,%.9f,%.9f,%s\n", r.specimen_id.c_str(), r.prediction,
                      r.label, slidegen::to_string(r.split).c_str());
        f << buf;
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    std::vector<PredictionRow> rows;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) continue;
        std::stringstream ss(line);
        std::string id, pred, label, split;
        if (!std::getline(ss, id, ',') || !std::getline(ss, pred, ',') ||
            !std::getline(ss, label, ',') || !std::getline(ss, split))
            throw std::runtime_error("bad predictions row at line " + std::to_string(line_no));
        rows.push_back(
            {id, std::stod(pred), std::stod(label), slidegen::split_from_string(split)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

namespace {

MetricWithCi with_ci(double value, bool defined,
                     const std::function<std::optional<double>(std::span<const size_t>)>& metric,
                     size_t n, const EvalConfig& cfg, uint64_t stream) {
    MetricWithCi out;
    out.value = value;
    out.defined = defined;
    if (defined)
        out.ci = bootstrap_ci(metric, n, cfg.n_resamples, cfg.confidence,
                              derive_seed(cfg.seed, stream));
    else {
        out.ci.confidence = cfg.confidence;
        out.ci.low = out.ci.high = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

SiteReport site_report(const std::string& site, const std::vector<double>& preds,
                       const std::vector<double>& labels, const EvalConfig& cfg,
                       uint64_t stream_base) {
    const size_t n = preds.size();
    SiteReport rep;
    rep.site = site;
    rep.n = n;

    auto rmse_of = [&](std::span<const size_t> idx) -> std::optional<double> {
        double acc = 0.0;
        for (const size_t i : idx) acc += (preds[i] - labels[i]) * (preds[i] - labels[i]);
        return std::sqrt(acc / static_cast<double>(idx.size()));
    };
    {
        std::vector<size_t> all(n);
        std::iota(all.begin(), all.end(), size_t{0});
        rep.rmse = with_ci(*rmse_of(all), true, rmse_of, n, cfg, stream_base + 1);
    }

    auto r2_of = [&](std::span<const size_t> idx) -> std::optional<double> {
        double mean = 0.0;
        for (const size_t i : idx) mean += labels[i];
        mean /= static_cast<double>(idx.size());
        double ss_res = 0.0, ss_tot = 0.0;
        for (const size_t i : idx) {
            ss_res += (preds[i] - labels[i]) * (preds[i] - labels[i]);
            ss_tot += (labels[i] - mean) * (labels[i] - mean);
        }
        if (ss_tot <= 0.0) return std::nullopt;
        return 1.0 - ss_res / ss_tot;
    };
    {
        std::vector<size_t> all(n);
        std::iota(all.begin(), all.end(), size_t{0});
        const auto v = n >= 2 ? r2_of(all) : std::nullopt;
        rep.r2 = with_ci(v.value_or(std::numeric_limits<double>::quiet_NaN()), v.has_value(),
                         r2_of, n, cfg, stream_base + 2);
    }

    std::vector<int> y(n);
    long long pos = 0;
    for (size_t i = 0; i < n; ++i) {
        y[i] = labels[i] > cfg.gt_threshold ? 1 : 0;
        pos += y[i];
    }
    const bool two_class = pos > 0 && pos < static_cast<long long>(n);

    auto subset = [&](std::span<const size_t> idx, std::vector<double>& sp, std::vector<int>& sy) {
        sp.clear();
        sy.clear();
        for (const size_t i : idx) {
            sp.push_back(preds[i]);
            sy.push_back(y[i]);
        }
    };
    auto auc_of = [&](std::span<const size_t> idx) -> std::optional<double> {
        std::vector<double> sp;
        std::vector<int> sy;
        subset(idx, sp, sy);
        try {
            return roc_auc(sp, sy).auc;
        } catch (const std::invalid_argument&) {
            return std::nullopt;
        }
    };
    auto pr_of = [&](int which) {
        return [&, which](std::span<const size_t> idx) -> std::optional<double> {
            std::vector<double> sp;
            std::vector<int> sy;
            subset(idx, sp, sy);
            try {
                const auto pr = pr_metrics(sp, sy, cfg.gt_threshold);
                switch (which) {
                    case 0:
                        if (!pr.precision_defined) return std::nullopt;
                        return pr.precision;
                    case 1: return pr.recall;
                    case 2: return pr.specificity;
                    default: return pr.average_precision;
                }
            } catch (const std::invalid_argument&) {
                return std::nullopt;
            }
        };
    };

    if (two_class) {
        const auto full = roc_auc(preds, y);
        const auto pr = pr_metrics(preds, y, cfg.gt_threshold);
        rep.auc = with_ci(full.auc, true, auc_of, n, cfg, stream_base + 3);
        rep.average_precision =
            with_ci(pr.average_precision, true, pr_of(3), n, cfg, stream_base + 4);
        rep.precision = with_ci(pr.precision, pr.precision_defined, pr_of(0), n, cfg,
                                stream_base + 5);
        rep.recall = with_ci(pr.recall, true, pr_of(1), n, cfg, stream_base + 6);
        rep.specificity = with_ci(pr.specificity, true, pr_of(2), n, cfg, stream_base + 7);
    } else {
        const auto nan = std::numeric_limits<double>::quiet_NaN();
        for (auto* m : {&rep.auc, &rep.average_precision, &rep.precision, &rep.recall,
                        &rep.specificity}) {
            m->value = nan;
            m->defined = false;
            m->ci.low = m->ci.high = nan;
            m->ci.confidence = cfg.confidence;
        }
    }
    return rep;
}

} // namespace

EvalReport evaluate(const std::vector<PredictionRow>& predictions,
                    const slidegen::DatasetManifest& manifest, const EvalConfig& cfg) {
    std::map<std::string, const PredictionRow*> by_id;
    for (const auto& row : predictions) {
        if (!by_id.emplace(row.specimen_id, &row).second)
            throw std::runtime_error("duplicate prediction for specimen " + row.specimen_id);
    }

    EvalReport rep;
    rep.cfg = cfg;
    std::vector<std::string> sites;
    for (const auto& rec : manifest) {
        if (rec.split != slidegen::Split::Test) continue;
        const auto it = by_id.find(rec.specimen_id);
        if (it == by_id.end())
            throw std::runtime_error("missing prediction for specimen " + rec.specimen_id);
        rep.preds.push_back(it->second->prediction);
        rep.labels.push_back(rec.label.value());
        sites.push_back(rec.site);
    }
    if (rep.preds.empty()) throw std::runtime_error("no test specimens in manifest");

    rep.sites.push_back(site_report("", rep.preds, rep.labels, cfg, 0x100));

    std::set<std::string> distinct(sites.begin(), sites.end());
    distinct.erase("");
    uint64_t stream = 0x2000;
    for (const auto& site : distinct) {
        std::vector<double> sp, sl;
        for (size_t i = 0; i < sites.size(); ++i) {
            if (sites[i] != site) continue;
            sp.push_back(rep.preds[i]);
            sl.push_back(rep.labels[i]);
        }
        rep.sites.push_back(site_report(site, sp, sl, cfg, stream));
        stream += 0x100;
    }

    // residual diagnostics on the pooled test set
    try {
        rep.residuals_std = standardized_residuals(rep.preds, rep.labels);
        rep.pp = pp_points(rep.residuals_std);
        if (rep.residuals_std.size() >= 3 && rep.residuals_std.size() <= 5000) {
            const auto sw = shapiro_wilk(rep.residuals_std);
            rep.shapiro_w = sw.w;
            rep.shapiro_p = sw.p;
            rep.diagnostics_available = true;
        }
    } catch (const std::exception&) {
        rep.diagnostics_available = false;
    }

    std::vector<int> y(rep.labels.size());
    long long pos = 0;
    for (size_t i = 0; i < rep.labels.size(); ++i) {
        y[i] = rep.labels[i] > cfg.gt_threshold ? 1 : 0;
        pos += y[i];
    }
    if (pos > 0 && pos < static_cast<long long>(y.size())) {
        rep.roc = roc_auc(rep.preds, y);
        rep.pr = pr_metrics(rep.preds, y, cfg.gt_threshold);
    }
    return rep;
}

void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "metric,value,ci_low,ci_high,site\n";
    char buf[256];
    auto row = [&](const char* name, const MetricWithCi& m, const std::string& site) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%s\n", name, m.value, m.ci.low,
                      m.ci.high, site.c_str());
        f << buf;
    };
    for (const auto& s : report.sites) {
        row("rmse", s.rmse, s.site);
        row("r2", s.r2, s.site);
        row("auc", s.auc, s.site);
        row("average_precision", s.average_precision, s.site);
        row("precision", s.precision, s.site);
        row("recall", s.recall, s.site);
        row("specificity", s.specificity, s.site);
        if (s.site.empty()) {
            if (report.diagnostics_available) {
                std::snprintf(buf, sizeof(buf), "shapiro_w,%.6f,,,\n", report.shapiro_w);
                f << buf;
                std::snprintf(buf, sizeof(buf), "shapiro_p,%.6f,,,\n", report.shapiro_p);
                f << buf;
            } else {
                f << "shapiro_w,nan,,,\n";
                f << "shapiro_p,nan,,,\n";
            }
        }
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

} // namespace concordia::stats
