#include "concordia/milreg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>

#include "concordia/binio.hpp"
#include "concordia/kernels.hpp"
#include "concordia/rng.hpp"

namespace concordia::milreg {

std::vector<EmbeddingBag> build_bags(const features::EmbeddingStore& store,
                                     const slidegen::DatasetManifest& manifest) {
    std::map<std::string, std::vector<const features::EmbeddingRecord*>> by_specimen;
    for (const auto& r : store.records) by_specimen[r.specimen_id].push_back(&r);

    std::vector<EmbeddingBag> bags;
    for (const auto& rec : manifest) {
        const auto it = by_specimen.find(rec.specimen_id);
        if (it == by_specimen.end()) continue;
        EmbeddingBag bag;
        bag.specimen_id = rec.specimen_id;
        bag.dim = static_cast<int>(store.dim);
        bag.count = static_cast<int>(it->second.size());
        bag.instances.reserve(static_cast<size_t>(bag.count) * bag.dim);
        for (const auto* er : it->second)
            for (const float v : er->vec) bag.instances.push_back(v);
        bag.label = rec.label.value();
        bag.split = rec.split;
        bags.push_back(std::move(bag));
    }
    return bags;
}

std::vector<std::vector<double>*> RegressorParams::arrays() {
    std::vector<std::vector<double>*> out;
    for (size_t i = 0; i < fc_w.size(); ++i) {
        out.push_back(&fc_w[i]);
        out.push_back(&fc_b[i]);
    }
    out.push_back(&att_v);
    out.push_back(&att_u);
    out.push_back(&att_w);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

std::vector<const std::vector<double>*> RegressorParams::arrays() const {
    std::vector<const std::vector<double>*> out;
    for (size_t i = 0; i < fc_w.size(); ++i) {
        out.push_back(&fc_w[i]);
        out.push_back(&fc_b[i]);
    }
    out.push_back(&att_v);
    out.push_back(&att_u);
    out.push_back(&att_w);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

std::vector<std::vector<double>*> RegressorGrads::arrays() {
    std::vector<std::vector<double>*> out;
    for (size_t i = 0; i < fc_w.size(); ++i) {
        out.push_back(&fc_w[i]);
        out.push_back(&fc_b[i]);
    }
    out.push_back(&att_v);
    out.push_back(&att_u);
    out.push_back(&att_w);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

RegressorParams init_regressor(const RegressorConfig& cfg, uint64_t seed) {
    if (cfg.input_dim < 1 || cfg.fc_widths.empty() || cfg.attention_dim < 1 ||
        (cfg.output_dim != 1 && cfg.output_dim != 2))
        throw std::invalid_argument("bad regressor config");
    RegressorParams p;
    p.cfg = cfg;
    p.init = features::InitRecord{"he_uniform", seed};
    Rng rng(derive_seed(seed, 0x3E6));
    auto he = [&rng](std::vector<double>& w, int fan_in) {
        const double limit = std::sqrt(6.0 / fan_in);
        for (auto& x : w) x = rng.uniform(-limit, limit);
    };
    int d_in = cfg.input_dim;
    for (const int width : cfg.fc_widths) {
        if (width < 1) throw std::invalid_argument("bad fc width");
        std::vector<double> w(static_cast<size_t>(width) * d_in);
        he(w, d_in);
        p.fc_w.push_back(std::move(w));
        p.fc_b.emplace_back(static_cast<size_t>(width), 0.0);
        d_in = width;
    }
    p.input_mean.assign(static_cast<size_t>(cfg.input_dim), 0.0);
    p.input_scale.assign(static_cast<size_t>(cfg.input_dim), 1.0);
    const int m = cfg.fc_widths.back();
    p.att_v.resize(static_cast<size_t>(cfg.attention_dim) * m);
    he(p.att_v, m);
    p.att_u.resize(static_cast<size_t>(cfg.attention_dim) * m);
    he(p.att_u, m);
    p.att_w.resize(static_cast<size_t>(cfg.attention_dim));
    he(p.att_w, cfg.attention_dim);
    p.head_w.resize(static_cast<size_t>(cfg.output_dim) * m);
    he(p.head_w, m);
    p.head_b.assign(static_cast<size_t>(cfg.output_dim), 0.0);
    return p;
}

namespace {

struct AttentionCache {
    std::vector<double> t;       // k x A: tanh(V h)
    std::vector<double> g;       // k x A: sigmoid(U h) (all ones when ungated)
    std::vector<double> weights; // k
};

void attention_forward(std::span<const double> h, int k, int m, const RegressorParams& p,
                       std::vector<double>& bag, AttentionCache* cache) {
    const int a_dim = p.cfg.attention_dim;
    std::vector<double> t(static_cast<size_t>(k) * a_dim);
    std::vector<double> g(static_cast<size_t>(k) * a_dim, 1.0);
    kern::affine_forward(h.data(), k, m, p.att_v.data(), nullptr, a_dim, t.data());
    for (auto& x : t) x = std::tanh(x);
    if (p.cfg.gated_attention) {
        kern::affine_forward(h.data(), k, m, p.att_u.data(), nullptr, a_dim, g.data());
        for (auto& x : g) x = 1.0 / (1.0 + std::exp(-x));
    }
    std::vector<double> scores(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        for (int a = 0; a < a_dim; ++a)
            s += p.att_w[static_cast<size_t>(a)] * t[static_cast<size_t>(i) * a_dim + a] *
                 g[static_cast<size_t>(i) * a_dim + a];
        scores[static_cast<size_t>(i)] = s;
    }
    const double mx = *std::max_element(scores.begin(), scores.end());
    double denom = 0.0;
    std::vector<double> weights(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        weights[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)] - mx);
        denom += weights[static_cast<size_t>(i)];
    }
    for (auto& w : weights) w /= denom;

    bag.assign(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < k; ++i) {
        const double w = weights[static_cast<size_t>(i)];
        const double* hi = h.data() + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) bag[static_cast<size_t>(j)] += w * hi[j];
    }
    if (cache) {
        cache->t = std::move(t);
        cache->g = std::move(g);
        cache->weights = std::move(weights);
    }
}

// d_bag -> d_h (k x m) plus parameter grads
void attention_backward(std::span<const double> h, int k, int m, const RegressorParams& p,
                        const AttentionCache& c, std::span<const double> d_bag,
                        std::vector<double>& d_h, RegressorGrads& grads) {
    const int a_dim = p.cfg.attention_dim;
    d_h.assign(static_cast<size_t>(k) * m, 0.0);

    // direct term: bag = sum a_i h_i
    for (int i = 0; i < k; ++i) {
        const double w = c.weights[static_cast<size_t>(i)];
        double* dhi = d_h.data() + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) dhi[j] += w * d_bag[static_cast<size_t>(j)];
    }

    // softmax backward: d_score_i = a_i (d_a_i - sum_j a_j d_a_j)
    std::vector<double> d_a(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const double* hi = h.data() + static_cast<size_t>(i) * m;
        double acc = 0.0;
        for (int j = 0; j < m; ++j) acc += hi[j] * d_bag[static_cast<size_t>(j)];
        d_a[static_cast<size_t>(i)] = acc;
    }
    double mix = 0.0;
    for (int i = 0; i < k; ++i)
        mix += c.weights[static_cast<size_t>(i)] * d_a[static_cast<size_t>(i)];
    std::vector<double> d_score(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
        d_score[static_cast<size_t>(i)] =
            c.weights[static_cast<size_t>(i)] * (d_a[static_cast<size_t>(i)] - mix);

    // score_i = w^T (t_i . g_i)
    std::vector<double> d_t(static_cast<size_t>(k) * a_dim);
    std::vector<double> d_g(static_cast<size_t>(k) * a_dim, 0.0);
    for (int i = 0; i < k; ++i) {
        const double ds = d_score[static_cast<size_t>(i)];
        for (int a = 0; a < a_dim; ++a) {
            const size_t ia = static_cast<size_t>(i) * a_dim + static_cast<size_t>(a);
            grads.att_w[static_cast<size_t>(a)] += ds * c.t[ia] * c.g[ia];
            d_t[ia] = ds * p.att_w[static_cast<size_t>(a)] * c.g[ia];
            if (p.cfg.gated_attention) d_g[ia] = ds * p.att_w[static_cast<size_t>(a)] * c.t[ia];
        }
    }
    // through tanh / sigmoid to pre-activations
    for (size_t ia = 0; ia < d_t.size(); ++ia) d_t[ia] *= 1.0 - c.t[ia] * c.t[ia];
    if (p.cfg.gated_attention)
        for (size_t ia = 0; ia < d_g.size(); ++ia) d_g[ia] *= c.g[ia] * (1.0 - c.g[ia]);

    // V h and U h are affine maps without bias; accumulate into the grads
    std::vector<double> d_h_att(static_cast<size_t>(k) * m);
    std::vector<double> dw_local(static_cast<size_t>(a_dim) * m);
    std::vector<double> dummy_bias(static_cast<size_t>(a_dim));
    kern::affine_backward_params(d_t.data(), h.data(), k, m, a_dim, dw_local.data(),
                                 dummy_bias.data());
    for (size_t i = 0; i < dw_local.size(); ++i) grads.att_v[i] += dw_local[i];
    kern::affine_backward_input(d_t.data(), p.att_v.data(), k, m, a_dim, d_h_att.data());
    for (size_t i = 0; i < d_h.size(); ++i) d_h[i] += d_h_att[i];
    if (p.cfg.gated_attention) {
        kern::affine_backward_params(d_g.data(), h.data(), k, m, a_dim, dw_local.data(),
                                     dummy_bias.data());
        for (size_t i = 0; i < dw_local.size(); ++i) grads.att_u[i] += dw_local[i];
        kern::affine_backward_input(d_g.data(), p.att_u.data(), k, m, a_dim, d_h_att.data());
        for (size_t i = 0; i < d_h.size(); ++i) d_h[i] += d_h_att[i];
    }
}

} // namespace

AttentionResult attention_pool(std::span<const double> instances, int k, int dim,
                               const RegressorParams& p) {
    if (k < 1) throw std::invalid_argument("attention_pool needs k >= 1");
    if (dim != p.cfg.fc_widths.back() ||
        instances.size() != static_cast<size_t>(k) * dim)
        throw std::invalid_argument("attention_pool shape mismatch");
    AttentionResult r;
    AttentionCache cache;
    attention_forward(instances, k, dim, p, r.bag, &cache);
    r.weights = std::move(cache.weights);
    return r;
}

struct BagCache {
    int k = 0;
    std::vector<std::vector<double>> fc_pre;  // per layer, k x width
    std::vector<std::vector<double>> fc_act;  // post relu+dropout (layer inputs are prev act)
    std::vector<std::vector<double>> fc_mask; // dropout scale per element (1/keep or 0)
    std::vector<double> input;                // k x input_dim copy
    AttentionCache att;
    std::vector<double> bag_vec;
};

BagCache* new_cache() { return new BagCache(); }
void free_cache(BagCache* cache) { delete cache; }

std::vector<double> regressor_forward(const RegressorParams& p, const EmbeddingBag& bag, Mode mode,
                                      double dropout_prob, uint64_t dropout_seed, BagCache* cache) {
    if (bag.count < 1) throw std::invalid_argument("empty bag");
    if (bag.dim != p.cfg.input_dim) throw std::invalid_argument("embedding dim mismatch");
    if (dropout_prob < 0.0 || dropout_prob >= 1.0)
        throw std::invalid_argument("dropout_prob must be in [0,1)");

    const int k = bag.count;
    std::unique_ptr<BagCache> local;
    BagCache* c = cache;
    if (!c) {
        local = std::make_unique<BagCache>();
        c = local.get();
    }
    c->k = k;
    c->input = bag.instances;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < bag.dim; ++j) {
            auto& x = c->input[static_cast<size_t>(i) * bag.dim + j];
            x = (x - p.input_mean[static_cast<size_t>(j)]) * p.input_scale[static_cast<size_t>(j)];
        }
    c->fc_pre.assign(p.fc_w.size(), {});
    c->fc_act.assign(p.fc_w.size(), {});
    c->fc_mask.assign(p.fc_w.size(), {});

    Rng drop_rng(derive_seed(dropout_seed, 0xD20));
    const double keep = 1.0 - dropout_prob;

    const std::vector<double>* cur = &c->input;
    int d_in = p.cfg.input_dim;
    for (size_t li = 0; li < p.fc_w.size(); ++li) {
        const int width = p.cfg.fc_widths[li];
        auto& pre = c->fc_pre[li];
        pre.resize(static_cast<size_t>(k) * width);
        kern::affine_forward(cur->data(), k, d_in, p.fc_w[li].data(), p.fc_b[li].data(), width,
                             pre.data());
        auto& act = c->fc_act[li];
        act = pre;
        kern::relu_forward(act.data(), act.size());
        if (mode == Mode::Train && dropout_prob > 0.0) {
            auto& mask = c->fc_mask[li];
            mask.resize(act.size());
            for (size_t i = 0; i < act.size(); ++i) {
                mask[i] = drop_rng.uniform() < keep ? 1.0 / keep : 0.0;
                act[i] *= mask[i];
            }
        }
        cur = &act;
        d_in = width;
    }

    attention_forward(*cur, k, d_in, p, c->bag_vec, &c->att);

    std::vector<double> out(static_cast<size_t>(p.cfg.output_dim));
    kern::affine_forward(c->bag_vec.data(), 1, d_in, p.head_w.data(), p.head_b.data(),
                         p.cfg.output_dim, out.data());
    return out;
}

RegressorGrads zero_grads(const RegressorParams& p) {
    RegressorGrads g;
    for (const auto& w : p.fc_w) g.fc_w.emplace_back(w.size(), 0.0);
    for (const auto& b : p.fc_b) g.fc_b.emplace_back(b.size(), 0.0);
    g.att_v.assign(p.att_v.size(), 0.0);
    g.att_u.assign(p.att_u.size(), 0.0);
    g.att_w.assign(p.att_w.size(), 0.0);
    g.head_w.assign(p.head_w.size(), 0.0);
    g.head_b.assign(p.head_b.size(), 0.0);
    return g;
}

void regressor_backward(const RegressorParams& p, const BagCache& c,
                        std::span<const double> d_output, RegressorGrads& grads) {
    const int k = c.k;
    const int m = p.cfg.fc_widths.back();

    // head (single-row affine); grads accumulate
    std::vector<double> d_bag(static_cast<size_t>(m), 0.0);
    for (int o = 0; o < p.cfg.output_dim; ++o) {
        const double g = d_output[static_cast<size_t>(o)];
        grads.head_b[static_cast<size_t>(o)] += g;
        for (int j = 0; j < m; ++j) {
            grads.head_w[static_cast<size_t>(o) * m + j] += g * c.bag_vec[static_cast<size_t>(j)];
            d_bag[static_cast<size_t>(j)] += g * p.head_w[static_cast<size_t>(o) * m + j];
        }
    }

    const auto& h_last = c.fc_act.back();
    std::vector<double> d_h;
    attention_backward(h_last, k, m, p, c.att, d_bag, d_h, grads);

    // FC stack backward, accumulating parameter grads
    for (int li = static_cast<int>(p.fc_w.size()) - 1; li >= 0; --li) {
        const size_t l = static_cast<size_t>(li);
        const int width = p.cfg.fc_widths[l];
        const int d_in = li == 0 ? p.cfg.input_dim : p.cfg.fc_widths[l - 1];
        if (!c.fc_mask[l].empty())
            for (size_t i = 0; i < d_h.size(); ++i) d_h[i] *= c.fc_mask[l][i];
        kern::relu_backward(c.fc_pre[l].data(), d_h.data(), d_h.size());
        const std::vector<double>& layer_in = li == 0 ? c.input : c.fc_act[l - 1];
        std::vector<double> dw(static_cast<size_t>(width) * d_in);
        std::vector<double> db(static_cast<size_t>(width));
        kern::affine_backward_params(d_h.data(), layer_in.data(), k, d_in, width, dw.data(),
                                     db.data());
        for (size_t i = 0; i < dw.size(); ++i) grads.fc_w[l][i] += dw[i];
        for (size_t i = 0; i < db.size(); ++i) grads.fc_b[l][i] += db[i];
        if (li > 0) {
            std::vector<double> d_prev(static_cast<size_t>(k) * d_in);
            kern::affine_backward_input(d_h.data(), p.fc_w[l].data(), k, d_in, width,
                                        d_prev.data());
            d_h = std::move(d_prev);
        }
    }
}

double rmse_loss(std::span<const double> preds, std::span<const double> labels) {
    if (preds.size() != labels.size()) throw std::invalid_argument("length mismatch");
    if (preds.empty()) throw std::invalid_argument("empty input");
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - labels[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(preds.size()));
}

double predict_bag(const RegressorParams& p, const EmbeddingBag& bag) {
    const auto out = regressor_forward(p, bag, Mode::Eval, 0.0, 0, nullptr);
    if (p.cfg.output_dim == 1) return std::clamp(out[0], 0.0, 1.0);
    const double mx = std::max(out[0], out[1]);
    const double e0 = std::exp(out[0] - mx), e1 = std::exp(out[1] - mx);
    return e1 / (e0 + e1);
}

namespace {

void sgd_step(RegressorParams& p, RegressorGrads& g, std::vector<std::vector<double>>& velocity,
              double lr, double momentum) {
    auto pa = p.arrays();
    auto ga = g.arrays();
    if (velocity.empty())
        for (const auto* arr : pa) velocity.emplace_back(arr->size(), 0.0);
    for (size_t a = 0; a < pa.size(); ++a) {
        auto& w = *pa[a];
        const auto& grad = *ga[a];
        auto& v = velocity[a];
        for (size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum * v[i] - lr * grad[i];
            w[i] += v[i];
        }
    }
}

std::vector<double> per_dim_std(const std::vector<const EmbeddingBag*>& bags, int dim) {
    std::vector<double> mean(static_cast<size_t>(dim), 0.0);
    std::vector<double> sq(static_cast<size_t>(dim), 0.0);
    size_t n = 0;
    for (const auto* b : bags) {
        for (int i = 0; i < b->count; ++i) {
            const double* row = b->instances.data() + static_cast<size_t>(i) * dim;
            for (int j = 0; j < dim; ++j) {
                mean[static_cast<size_t>(j)] += row[j];
                sq[static_cast<size_t>(j)] += row[j] * row[j];
            }
            ++n;
        }
    }
    std::vector<double> sd(static_cast<size_t>(dim), 0.0);
    if (n == 0) return sd;
    for (int j = 0; j < dim; ++j) {
        const double m = mean[static_cast<size_t>(j)] / static_cast<double>(n);
        const double v = sq[static_cast<size_t>(j)] / static_cast<double>(n) - m * m;
        sd[static_cast<size_t>(j)] = v > 0 ? std::sqrt(v) : 0.0;
    }
    return sd;
}

TrainResult train_impl(const std::vector<EmbeddingBag>& bags, const TrainConfig& cfg,
                       const ReembedFn& reembed) {
    std::vector<const EmbeddingBag*> train, val;
    for (const auto& b : bags) {
        if (b.split == slidegen::Split::Train) train.push_back(&b);
        if (b.split == slidegen::Split::Val) val.push_back(&b);
    }
    if (train.empty() || val.empty())
        throw std::invalid_argument("train and validation splits must both be non-empty");
    if (cfg.accumulation < 1) throw std::invalid_argument("accumulation must be >= 1");

    const bool binary = cfg.loss == LossKind::CrossEntropy;
    auto target = [&](const EmbeddingBag& b) {
        return binary ? (b.label > cfg.binary_threshold ? 1.0 : 0.0) : b.label;
    };
    if (binary) {
        bool has0 = false, has1 = false;
        for (const auto* b : train) (target(*b) > 0.5 ? has1 : has0) = true;
        if (!has0 || !has1) throw std::invalid_argument("single-class training set");
    }

    TrainResult result;
    result.params = init_regressor(cfg.regressor, derive_seed(cfg.seed, 0x3E60));
    std::vector<std::vector<double>> velocity;

    // fit input standardization on the train split
    {
        const int dim = cfg.regressor.input_dim;
        std::vector<double> mean(static_cast<size_t>(dim), 0.0);
        size_t n = 0;
        for (const auto* b : train) {
            for (int i = 0; i < b->count; ++i)
                for (int j = 0; j < dim; ++j)
                    mean[static_cast<size_t>(j)] +=
                        b->instances[static_cast<size_t>(i) * dim + j];
            n += static_cast<size_t>(b->count);
        }
        for (auto& m : mean) m /= static_cast<double>(n);
        const auto sd = per_dim_std(train, dim);
        result.params.input_mean = mean;
        for (int j = 0; j < dim; ++j)
            result.params.input_scale[static_cast<size_t>(j)] =
                1.0 / std::max(sd[static_cast<size_t>(j)], 1e-8);
    }

    std::vector<double> jitter_sd;
    if (cfg.augment == AugmentMode::Jitter)
        jitter_sd = per_dim_std(train, cfg.regressor.input_dim);

    RegressorParams best = result.params;
    double best_val = std::numeric_limits<double>::infinity();

    auto val_metric = [&](const RegressorParams& p) {
        if (binary) {
            double ce = 0.0;
            for (const auto* b : val) {
                const auto logits = regressor_forward(p, *b, Mode::Eval, 0.0, 0, nullptr);
                const double mx = std::max(logits[0], logits[1]);
                const double lse = mx + std::log(std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
                const int y = target(*b) > 0.5 ? 1 : 0;
                ce += lse - logits[static_cast<size_t>(y)];
            }
            return ce / static_cast<double>(val.size());
        }
        std::vector<double> preds, labels;
        for (const auto* b : val) {
            preds.push_back(predict_bag(p, *b));
            labels.push_back(b->label);
        }
        return rmse_loss(preds, labels);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng epoch_rng(derive_seed(cfg.seed, 0xE'0000 + static_cast<uint64_t>(epoch)));
        epoch_rng.shuffle(order);

        double epoch_loss = 0.0;
        size_t groups = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.accumulation)) {
            const size_t take =
                std::min(static_cast<size_t>(cfg.accumulation), order.size() - off);
            RegressorGrads grads = zero_grads(result.params);

            std::vector<std::unique_ptr<BagCache, CacheDeleter>> caches;
            std::vector<std::vector<double>> outputs;
            std::vector<const EmbeddingBag*> group_bags;
            std::vector<EmbeddingBag> augmented; // storage for augmented copies
            augmented.reserve(take);
            for (size_t gi = 0; gi < take; ++gi) {
                const EmbeddingBag* b = train[order[off + gi]];
                const uint64_t bag_stream =
                    (static_cast<uint64_t>(epoch + 1) << 32) + order[off + gi];
                if (cfg.augment == AugmentMode::Jitter) {
                    EmbeddingBag jb = *b;
                    Rng jr(derive_seed(cfg.seed, bag_stream ^ 0x71773E5));
                    for (int i = 0; i < jb.count; ++i)
                        for (int j = 0; j < jb.dim; ++j)
                            jb.instances[static_cast<size_t>(i) * jb.dim + j] +=
                                jr.normal() * cfg.jitter_sigma * jitter_sd[static_cast<size_t>(j)];
                    augmented.push_back(std::move(jb));
                    b = &augmented.back();
                } else if (cfg.augment == AugmentMode::Reembed) {
                    if (!reembed)
                        throw std::invalid_argument("reembed augmentation needs a provider");
                    augmented.push_back(reembed(*b, derive_seed(cfg.seed, bag_stream)));
                    b = &augmented.back();
                }
                group_bags.push_back(b);
                auto* cache = new_cache();
                outputs.push_back(regressor_forward(result.params, *b, Mode::Train,
                                                    cfg.dropout_prob,
                                                    derive_seed(cfg.seed, bag_stream), cache));
                caches.emplace_back(cache);
            }

            double group_loss = 0.0;
            if (binary) {
                std::vector<std::vector<double>> d_outs(take, std::vector<double>(2, 0.0));
                for (size_t gi = 0; gi < take; ++gi) {
                    const auto& logits = outputs[gi];
                    const double mx = std::max(logits[0], logits[1]);
                    const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
                    const double z = e0 + e1;
                    const int y = target(*group_bags[gi]) > 0.5 ? 1 : 0;
                    group_loss += -std::log((y ? e1 : e0) / z);
                    d_outs[gi][0] = (e0 / z - (y == 0 ? 1.0 : 0.0)) / static_cast<double>(take);
                    d_outs[gi][1] = (e1 / z - (y == 1 ? 1.0 : 0.0)) / static_cast<double>(take);
                }
                group_loss /= static_cast<double>(take);
                for (size_t gi = 0; gi < take; ++gi)
                    regressor_backward(result.params, *caches[gi], d_outs[gi], grads);
            } else {
                double sq = 0.0;
                for (size_t gi = 0; gi < take; ++gi) {
                    const double d = outputs[gi][0] - group_bags[gi]->label;
                    sq += d * d;
                }
                group_loss = std::sqrt(sq / static_cast<double>(take));
                if (group_loss > 0.0) {
                    for (size_t gi = 0; gi < take; ++gi) {
                        const double d_out = (outputs[gi][0] - group_bags[gi]->label) /
                                             (static_cast<double>(take) * group_loss);
                        const std::vector<double> d{d_out};
                        regressor_backward(result.params, *caches[gi], d, grads);
                    }
                }
            }
            epoch_loss += group_loss;
            ++groups;
            sgd_step(result.params, grads, velocity, cfg.lr, cfg.momentum);
        }

        result.curve.train.push_back(groups ? epoch_loss / static_cast<double>(groups) : 0.0);
        const double v = val_metric(result.params);
        result.curve.val.push_back(v);
        if (v < best_val) {
            best_val = v;
            best = result.params;
            result.best_epoch = epoch;
        }
    }
    if (cfg.epochs > 0) result.params = std::move(best);
    return result;
}

} // namespace

TrainResult train_regressor(const std::vector<EmbeddingBag>& bags, const TrainConfig& cfg,
                            const ReembedFn& reembed) {
    return train_impl(bags, cfg, reembed);
}

TrainResult train_binary_classifier(const std::vector<EmbeddingBag>& bags, double threshold,
                                    TrainConfig cfg) {
    cfg.loss = LossKind::CrossEntropy;
    cfg.binary_threshold = threshold;
    cfg.regressor.output_dim = 2;
    return train_impl(bags, cfg, nullptr);
}

void save_regressor(const RegressorParams& p, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write("MIL1", 4);
    binio::put<uint32_t>(f, 1);
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.input_dim));
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.fc_widths.size()));
    for (const int w : p.cfg.fc_widths) binio::put<uint32_t>(f, static_cast<uint32_t>(w));
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.attention_dim));
    binio::put<uint8_t>(f, p.cfg.gated_attention ? 1 : 0);
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.output_dim));
    binio::put_string(f, p.init.scheme);
    binio::put<uint64_t>(f, p.init.seed);
    binio::put_doubles(f, p.input_mean);
    binio::put_doubles(f, p.input_scale);
    for (const auto* arr : p.arrays()) binio::put_doubles(f, *arr);
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

RegressorParams load_regressor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    binio::expect_magic(f, "MIL1");
    if (binio::get<uint32_t>(f) != 1) throw std::runtime_error("unsupported model version");
    RegressorConfig cfg;
    cfg.input_dim = static_cast<int>(binio::get<uint32_t>(f));
    const auto n_fc = binio::get<uint32_t>(f);
    cfg.fc_widths.clear();
    for (uint32_t i = 0; i < n_fc; ++i)
        cfg.fc_widths.push_back(static_cast<int>(binio::get<uint32_t>(f)));
    cfg.attention_dim = static_cast<int>(binio::get<uint32_t>(f));
    cfg.gated_attention = binio::get<uint8_t>(f) != 0;
    cfg.output_dim = static_cast<int>(binio::get<uint32_t>(f));
    features::InitRecord init;
    init.scheme = binio::get_string(f);
    init.seed = binio::get<uint64_t>(f);
    RegressorParams p = init_regressor(cfg, init.seed);
    p.init = init;
    binio::get_doubles(f, p.input_mean);
    binio::get_doubles(f, p.input_scale);
    for (auto* arr : p.arrays()) binio::get_doubles(f, *arr);
    return p;
}

} // namespace concordia::milreg
