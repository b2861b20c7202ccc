#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "concordia/milreg.hpp"
#include "concordia/rng.hpp"
#include "concordia/stats.hpp"

using namespace concordia;
using namespace concordia::milreg;

namespace fs = std::filesystem;

namespace {

RegressorConfig small_config(int input_dim = 6, int output_dim = 1) {
    RegressorConfig cfg;
    cfg.input_dim = input_dim;
    cfg.fc_widths = {8, 5};
    cfg.attention_dim = 4;
    cfg.output_dim = output_dim;
    return cfg;
}

EmbeddingBag random_bag(int k, int dim, uint64_t seed, double label = 0.5,
                        slidegen::Split split = slidegen::Split::Train) {
    EmbeddingBag bag;
    bag.specimen_id = "bag_" + std::to_string(seed);
    bag.dim = dim;
    bag.count = k;
    Rng rng(seed);
    bag.instances.resize(static_cast<size_t>(k) * dim);
    for (auto& x : bag.instances) x = rng.uniform(-1.0, 1.0);
    bag.label = label;
    bag.split = split;
    return bag;
}

double grad_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-4});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

// independent scalar-by-scalar evaluation of the gated attention formulas
AttentionResult attention_oracle(const std::vector<double>& h, int k, int m,
                                 const RegressorParams& p) {
    const int a_dim = p.cfg.attention_dim;
    std::vector<double> scores(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        double score = 0.0;
        for (int a = 0; a < a_dim; ++a) {
            double vh = 0.0, uh = 0.0;
            for (int j = 0; j < m; ++j) {
                vh += p.att_v[static_cast<size_t>(a) * m + j] * h[static_cast<size_t>(i) * m + j];
                uh += p.att_u[static_cast<size_t>(a) * m + j] * h[static_cast<size_t>(i) * m + j];
            }
            score += p.att_w[static_cast<size_t>(a)] * std::tanh(vh) * (1.0 / (1.0 + std::exp(-uh)));
        }
        scores[static_cast<size_t>(i)] = score;
    }
    double denom = 0.0;
    AttentionResult r;
    r.weights.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) denom += std::exp(scores[static_cast<size_t>(i)]);
    for (int i = 0; i < k; ++i) r.weights[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)]) / denom;
    r.bag.assign(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < m; ++j)
            r.bag[static_cast<size_t>(j)] +=
                r.weights[static_cast<size_t>(i)] * h[static_cast<size_t>(i) * m + j];
    return r;
}

} // namespace

TEST_CASE("attention_pool singleton bag gets weight 1 and passes the feature through") {
    const auto cfg = small_config();
    const auto p = init_regressor(cfg, 1);
    const int m = cfg.fc_widths.back();
    Rng rng(2);
    std::vector<double> h(static_cast<size_t>(m));
    for (auto& x : h) x = rng.uniform(-1.0, 1.0);
    const auto r = attention_pool(h, 1, m, p);
    REQUIRE(r.weights.size() == 1);
    CHECK(r.weights[0] == 1.0);
    CHECK(r.bag == h);
}

TEST_CASE("attention_pool on identical instances is uniform") {
    const auto cfg = small_config();
    const auto p = init_regressor(cfg, 3);
    const int m = cfg.fc_widths.back();
    const int k = 7;
    Rng rng(4);
    std::vector<double> row(static_cast<size_t>(m));
    for (auto& x : row) x = rng.uniform(-1.0, 1.0);
    std::vector<double> h;
    for (int i = 0; i < k; ++i) h.insert(h.end(), row.begin(), row.end());
    const auto r = attention_pool(h, k, m, p);
    for (const double w : r.weights) CHECK(w == doctest::Approx(1.0 / k).epsilon(1e-12));
    for (int j = 0; j < m; ++j) CHECK(r.bag[static_cast<size_t>(j)] == doctest::Approx(row[static_cast<size_t>(j)]).epsilon(1e-12));
}

TEST_CASE("attention_pool matches the scalar oracle on random bags") {
    const auto cfg = small_config();
    const auto p = init_regressor(cfg, 5);
    const int m = cfg.fc_widths.back();
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 5;
        Rng rng(100 + trial);
        std::vector<double> h(static_cast<size_t>(k) * m);
        for (auto& x : h) x = rng.uniform(-2.0, 2.0);
        const auto got = attention_pool(h, k, m, p);
        const auto want = attention_oracle(h, k, m, p);
        for (int i = 0; i < k; ++i)
            CHECK(got.weights[static_cast<size_t>(i)] ==
                  doctest::Approx(want.weights[static_cast<size_t>(i)]).epsilon(1e-12));
        for (int j = 0; j < m; ++j)
            CHECK(got.bag[static_cast<size_t>(j)] ==
                  doctest::Approx(want.bag[static_cast<size_t>(j)]).epsilon(1e-12));
    }
}

TEST_CASE("attention weights sum to one; pooling is permutation and duplication invariant") {
    const auto cfg = small_config();
    const auto p = init_regressor(cfg, 6);
    const int m = cfg.fc_widths.back();
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 1 + static_cast<int>(rng.uniform_int(9));
        std::vector<double> h(static_cast<size_t>(k) * m);
        for (auto& x : h) x = rng.uniform(-2.0, 2.0);
        const auto base = attention_pool(h, k, m, p);

        double sum = 0.0;
        for (const double w : base.weights) {
            CHECK(w >= 0.0);
            sum += w;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);

        // permute instances
        std::vector<size_t> perm(static_cast<size_t>(k));
        std::iota(perm.begin(), perm.end(), size_t{0});
        rng.shuffle(perm);
        std::vector<double> hp(h.size());
        for (int i = 0; i < k; ++i)
            std::copy(h.begin() + static_cast<long>(perm[static_cast<size_t>(i)] * m),
                      h.begin() + static_cast<long>((perm[static_cast<size_t>(i)] + 1) * m),
                      hp.begin() + static_cast<long>(static_cast<size_t>(i) * m));
        const auto permuted = attention_pool(hp, k, m, p);
        for (int i = 0; i < k; ++i)
            CHECK(permuted.weights[static_cast<size_t>(i)] ==
                  doctest::Approx(base.weights[perm[static_cast<size_t>(i)]]).epsilon(1e-9));
        for (int j = 0; j < m; ++j)
            CHECK(permuted.bag[static_cast<size_t>(j)] ==
                  doctest::Approx(base.bag[static_cast<size_t>(j)]).epsilon(1e-9));

        // duplicate every instance
        std::vector<double> hd;
        hd.insert(hd.end(), h.begin(), h.end());
        hd.insert(hd.end(), h.begin(), h.end());
        const auto doubled = attention_pool(hd, 2 * k, m, p);
        for (int j = 0; j < m; ++j)
            CHECK(doubled.bag[static_cast<size_t>(j)] ==
                  doctest::Approx(base.bag[static_cast<size_t>(j)]).epsilon(1e-9));
    }
}

TEST_CASE("regressor_forward zero params output zero; eval mode is pure") {
    const auto cfg = small_config();
    auto p = init_regressor(cfg, 7);
    const auto bag = random_bag(4, cfg.input_dim, 70);
    for (auto* arr : p.arrays()) std::fill(arr->begin(), arr->end(), 0.0);
    CHECK(regressor_forward(p, bag, Mode::Eval, 0.0, 0, nullptr)[0] == 0.0);

    const auto q = init_regressor(cfg, 8);
    const auto a = regressor_forward(q, bag, Mode::Eval, 0.0, 0, nullptr);
    const auto b = regressor_forward(q, bag, Mode::Eval, 0.0, 0, nullptr);
    CHECK(a == b);
}

TEST_CASE("full regressor gradient matches finite differences (RMSE group loss)") {
    for (int trial = 0; trial < 5; ++trial) {
        const auto cfg = small_config(5 + trial % 3);
        RegressorParams p = init_regressor(cfg, 200 + trial);
        std::vector<EmbeddingBag> bags;
        for (int b = 0; b < 3; ++b)
            bags.push_back(random_bag(2 + b, cfg.input_dim, 300 + trial * 10 + b,
                                      0.2 + 0.3 * b));

        auto loss_of = [&]() {
            double sq = 0.0;
            for (const auto& bag : bags) {
                const double pred = regressor_forward(p, bag, Mode::Eval, 0.0, 0, nullptr)[0];
                sq += (pred - bag.label) * (pred - bag.label);
            }
            return std::sqrt(sq / static_cast<double>(bags.size()));
        };

        RegressorGrads grads = zero_grads(p);
        const double loss = loss_of();
        REQUIRE(loss > 0.0);
        for (const auto& bag : bags) {
            auto* cache = new_cache();
            std::unique_ptr<BagCache, CacheDeleter> guard(cache);
            const double pred = regressor_forward(p, bag, Mode::Eval, 0.0, 0, cache)[0];
            const std::vector<double> d_out{(pred - bag.label) /
                                            (static_cast<double>(bags.size()) * loss)};
            regressor_backward(p, *cache, d_out, grads);
        }

        auto params = p.arrays();
        auto grad_arrays = grads.arrays();
        const double h = 1e-6;
        Rng pick(400 + trial);
        std::vector<double> analytic, fd;
        for (size_t a = 0; a < params.size(); ++a) {
            for (int probe = 0; probe < 8; ++probe) {
                const size_t i = static_cast<size_t>(pick.uniform_int(params[a]->size()));
                const double orig = (*params[a])[i];
                (*params[a])[i] = orig + h;
                const double up = loss_of();
                (*params[a])[i] = orig - h;
                const double dn = loss_of();
                (*params[a])[i] = orig;
                analytic.push_back((*grad_arrays[a])[i]);
                fd.push_back((up - dn) / (2 * h));
            }
        }
        CHECK(grad_rel_err(analytic, fd) < 1e-4);
    }
}

TEST_CASE("rmse_loss worked examples and validation") {
    CHECK(rmse_loss(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) == 0.0);
    CHECK(rmse_loss(std::vector<double>{0, 1}, std::vector<double>{1, 0}) == 1.0);
    CHECK(rmse_loss(std::vector<double>{0.5, 0.5}, std::vector<double>{0, 1}) == 0.5);
    CHECK_THROWS_AS(rmse_loss(std::vector<double>{1}, std::vector<double>{1, 2}),
                    std::invalid_argument);
    CHECK_THROWS_AS(rmse_loss(std::vector<double>{}, std::vector<double>{}),
                    std::invalid_argument);
}

TEST_CASE("build_bags groups embeddings per specimen with labels and splits") {
    features::EmbeddingStore store;
    store.dim = 3;
    for (int i = 0; i < 5; ++i) {
        features::EmbeddingRecord r;
        r.specimen_id = i < 3 ? "a" : "b";
        r.grid_x = static_cast<uint32_t>(i);
        r.vec = {static_cast<float>(i), 0.0f, 1.0f};
        store.records.push_back(std::move(r));
    }
    slidegen::DatasetManifest manifest;
    for (const auto* id : {"a", "b", "c"}) {
        slidegen::ManifestRecord rec;
        rec.specimen_id = id;
        rec.reviews = {{"R1", slidegen::Diagnosis::MelanomaInSitu},
                       {"R2", slidegen::Diagnosis::Other}};
        rec.label = slidegen::concordance_rate(rec.reviews);
        rec.split = slidegen::Split::Test;
        manifest.push_back(std::move(rec));
    }
    const auto bags = build_bags(store, manifest);
    REQUIRE(bags.size() == 2); // specimen c has no tiles
    CHECK(bags[0].specimen_id == "a");
    CHECK(bags[0].count == 3);
    CHECK(bags[1].count == 2);
    CHECK(bags[0].label == 0.5);
    CHECK(bags[0].split == slidegen::Split::Test);
}

TEST_CASE("train_regressor with lr 0 yields flat loss curves") {
    const auto cfg_reg = small_config(4);
    std::vector<EmbeddingBag> bags;
    Rng rng(5);
    for (int i = 0; i < 10; ++i)
        bags.push_back(random_bag(3, 4, 500 + i, rng.uniform(),
                                  i < 7 ? slidegen::Split::Train : slidegen::Split::Val));
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.momentum = 0.0;
    cfg.epochs = 3;
    cfg.dropout_prob = 0.0;
    cfg.regressor = cfg_reg;
    const auto result = train_regressor(bags, cfg);
    REQUIRE(result.curve.val.size() == 3);
    CHECK(result.curve.val[0] == doctest::Approx(result.curve.val[2]).epsilon(1e-12));
}

TEST_CASE("train_regressor requires both train and val bags") {
    const auto cfg_reg = small_config(4);
    std::vector<EmbeddingBag> only_train{random_bag(3, 4, 1, 0.5, slidegen::Split::Train)};
    TrainConfig cfg;
    cfg.regressor = cfg_reg;
    CHECK_THROWS_AS(train_regressor(only_train, cfg), std::invalid_argument);
}

TEST_CASE("binary classifier rejects single-class training sets and separates a planted signal") {
    const int dim = 4;
    TrainConfig cfg;
    cfg.regressor = small_config(dim, 2);
    cfg.epochs = 30;
    cfg.lr = 0.02;
    cfg.dropout_prob = 0.0;
    cfg.accumulation = 4;
    cfg.seed = 9;

    SUBCASE("single class errors") {
        std::vector<EmbeddingBag> bags;
        for (int i = 0; i < 8; ++i)
            bags.push_back(random_bag(3, dim, 600 + i, 0.0,
                                      i < 6 ? slidegen::Split::Train : slidegen::Split::Val));
        CHECK_THROWS_WITH_AS(train_binary_classifier(bags, 0.85, cfg), "single-class training set",
                             std::invalid_argument);
    }

    SUBCASE("separable bags reach AUC above chance") {
        // instances shifted by +2 for positive bags: trivially separable
        std::vector<EmbeddingBag> bags;
        Rng rng(31);
        for (int i = 0; i < 40; ++i) {
            const bool positive = i % 2 == 0;
            auto bag = random_bag(4, dim, 700 + i, positive ? 1.0 : 0.0,
                                  i < 28 ? slidegen::Split::Train
                                         : (i < 34 ? slidegen::Split::Val
                                                   : slidegen::Split::Test));
            if (positive)
                for (auto& x : bag.instances) x += 2.0;
            bags.push_back(std::move(bag));
        }
        const auto result = train_binary_classifier(bags, 0.85, cfg);
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& bag : bags) {
            if (bag.split != slidegen::Split::Test) continue;
            scores.push_back(predict_bag(result.params, bag));
            labels.push_back(bag.label > 0.85 ? 1 : 0);
        }
        CHECK(stats::roc_auc(scores, labels).auc > 0.5);
    }
}

TEST_CASE("regressor save/load round trip is exact") {
    const fs::path dir = fs::temp_directory_path() / "concordia_mil_test";
    fs::create_directories(dir);
    auto p = init_regressor(small_config(), 77);
    p.input_mean.assign(p.input_mean.size(), 0.25);
    p.input_scale.assign(p.input_scale.size(), 2.0);
    save_regressor(p, dir / "m.bin");
    const auto q = load_regressor(dir / "m.bin");
    CHECK(q.cfg.fc_widths == p.cfg.fc_widths);
    CHECK(q.cfg.output_dim == p.cfg.output_dim);
    CHECK(q.input_mean == p.input_mean);
    CHECK(q.input_scale == p.input_scale);
    const auto pa = p.arrays();
    const auto qa = q.arrays();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *qa[i]);
    fs::remove_all(dir);
}
