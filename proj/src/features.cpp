#include "concordia/features.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "concordia/binio.hpp"
#include "concordia/kernels.hpp"
#include "concordia/parallel.hpp"

namespace concordia::features {

ImageU8 augment(const ImageU8& tile, const AugmentationConfig& cfg, Rng& rng) {
    if (cfg.max_color_jitter < 0.0 || cfg.max_color_jitter >= 1.0)
        throw std::invalid_argument("max_color_jitter must be in [0,1)");
    if (cfg.noise_variance < 0.0) throw std::invalid_argument("noise_variance must be >= 0");

    const double m = cfg.max_color_jitter;
    const double d_bright = rng.uniform(-m, m);
    const double d_hue = rng.uniform(-m, m);
    const double d_contrast = rng.uniform(-m, m);
    const double d_sat = rng.uniform(-m, m);
    const int quarter_turns = cfg.rotations ? static_cast<int>(rng.uniform_int(4)) : 0;
    const double noise_sd = std::sqrt(cfg.noise_variance);

    ImageU8 out(tile.width, tile.height);
    const size_t n = tile.pixel_count();
    for (size_t i = 0; i < n; ++i) {
        const uint8_t* s = tile.rgb.data() + i * 3;
        double r = s[0] / 255.0, g = s[1] / 255.0, b = s[2] / 255.0;
        if (d_hue != 0.0 || d_sat != 0.0) {
            Hsv c = rgb_to_hsv(s[0], s[1], s[2]);
            c.h += d_hue;
            c.s = std::clamp(c.s * (1.0 + d_sat), 0.0, 1.0);
            uint8_t r8, g8, b8;
            hsv_to_rgb(c, r8, g8, b8);
            r = r8 / 255.0;
            g = g8 / 255.0;
            b = b8 / 255.0;
        }
        if (d_bright != 0.0) {
            r += d_bright;
            g += d_bright;
            b += d_bright;
        }
        if (d_contrast != 0.0) {
            r = 0.5 + (1.0 + d_contrast) * (r - 0.5);
            g = 0.5 + (1.0 + d_contrast) * (g - 0.5);
            b = 0.5 + (1.0 + d_contrast) * (b - 0.5);
        }
        if (noise_sd > 0.0) {
            r += rng.normal() * noise_sd;
            g += rng.normal() * noise_sd;
            b += rng.normal() * noise_sd;
        }
        uint8_t* d = out.rgb.data() + i * 3;
        d[0] = static_cast<uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255.0));
        d[1] = static_cast<uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255.0));
        d[2] = static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255.0));
    }
    return quarter_turns ? rotate90(out, quarter_turns) : out;
}

namespace {

struct BlockGeom {
    int c_in, in_size;   // input to the conv
    int conv_size;       // after conv (stride)
    int out_size;        // after 2x2 pool
    int c_out;
};

std::vector<BlockGeom> block_geometry(const EncoderConfig& cfg) {
    if (cfg.blocks.empty()) throw std::invalid_argument("encoder needs at least one block");
    std::vector<BlockGeom> geo;
    int size = cfg.input_size, c_in = 3;
    for (const auto& b : cfg.blocks) {
        if (b.out_channels < 1 || b.stride < 1) throw std::invalid_argument("bad block spec");
        BlockGeom g;
        g.c_in = c_in;
        g.in_size = size;
        g.conv_size = (size - 1) / b.stride + 1;
        if (g.conv_size < 2 || g.conv_size % 2 != 0)
            throw std::invalid_argument("conv output size must be even for 2x2 pooling");
        g.out_size = g.conv_size / 2;
        g.c_out = b.out_channels;
        geo.push_back(g);
        size = g.out_size;
        c_in = b.out_channels;
    }
    return geo;
}

} // namespace

std::vector<std::vector<double>*> EncoderParams::arrays() {
    std::vector<std::vector<double>*> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
        out.push_back(&conv_w[i]);
        out.push_back(&conv_b[i]);
    }
    out.push_back(&p1_w);
    out.push_back(&p1_b);
    out.push_back(&p2_w);
    out.push_back(&p2_b);
    return out;
}

std::vector<const std::vector<double>*> EncoderParams::arrays() const {
    std::vector<const std::vector<double>*> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
        out.push_back(&conv_w[i]);
        out.push_back(&conv_b[i]);
    }
    out.push_back(&p1_w);
    out.push_back(&p1_b);
    out.push_back(&p2_w);
    out.push_back(&p2_b);
    return out;
}

std::vector<std::vector<double>*> EncoderGrads::arrays() {
    std::vector<std::vector<double>*> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
        out.push_back(&conv_w[i]);
        out.push_back(&conv_b[i]);
    }
    out.push_back(&p1_w);
    out.push_back(&p1_b);
    out.push_back(&p2_w);
    out.push_back(&p2_b);
    return out;
}

EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed) {
    const auto geo = block_geometry(cfg);
    if (cfg.proj_hidden < 1 || cfg.proj_dim < 1)
        throw std::invalid_argument("projection head dims must be >= 1");
    EncoderParams p;
    p.cfg = cfg;
    p.init = InitRecord{"he_uniform", seed};
    Rng rng(derive_seed(seed, 0xE0C0DE));
    auto he = [&rng](std::vector<double>& w, int fan_in) {
        const double limit = std::sqrt(6.0 / fan_in);
        for (auto& x : w) x = rng.uniform(-limit, limit);
    };
    for (const auto& g : geo) {
        std::vector<double> w(static_cast<size_t>(g.c_out) * g.c_in * 9);
        he(w, g.c_in * 9);
        p.conv_w.push_back(std::move(w));
        p.conv_b.emplace_back(static_cast<size_t>(g.c_out), 0.0);
    }
    const int d = cfg.embedding_dim();
    p.p1_w.resize(static_cast<size_t>(cfg.proj_hidden) * d);
    he(p.p1_w, d);
    p.p1_b.assign(static_cast<size_t>(cfg.proj_hidden), 0.0);
    p.p2_w.resize(static_cast<size_t>(cfg.proj_dim) * cfg.proj_hidden);
    he(p.p2_w, cfg.proj_hidden);
    p.p2_b.assign(static_cast<size_t>(cfg.proj_dim), 0.0);
    return p;
}

EncoderParams frozen_random_embedder(uint64_t seed, int embedding_dim) {
    if (embedding_dim < 8) throw std::invalid_argument("embedding_dim must be >= 8");
    EncoderConfig cfg;
    cfg.blocks = {{std::max(1, embedding_dim / 8), 2},
                  {std::max(1, embedding_dim / 4), 1},
                  {std::max(1, embedding_dim / 2), 1},
                  {embedding_dim, 1}};
    cfg.proj_hidden = embedding_dim;
    cfg.proj_dim = std::max(1, embedding_dim / 2);
    EncoderParams p = init_encoder(cfg, seed);
    p.init.scheme = "he_uniform_frozen";
    return p;
}

void encoder_forward(const EncoderParams& p, std::span<const double> batch, int n,
                     std::vector<double>& projections, ForwardCache* cache) {
    const auto geo = block_geometry(p.cfg);
    const size_t in_elems = static_cast<size_t>(n) * 3 * p.cfg.input_size * p.cfg.input_size;
    if (batch.size() != in_elems) throw std::invalid_argument("encoder input shape mismatch");

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.n = n;
    c.block_inputs.assign(geo.size() + 1, {});
    c.conv_pre.assign(geo.size(), {});
    c.block_inputs[0].assign(batch.begin(), batch.end());

    for (size_t bi = 0; bi < geo.size(); ++bi) {
        const auto& g = geo[bi];
        const auto d =
            kern::conv2d_dims(n, g.c_in, g.in_size, g.in_size, g.c_out, p.cfg.blocks[bi].stride);
        c.conv_pre[bi].resize(static_cast<size_t>(n) * g.c_out * g.conv_size * g.conv_size);
        kern::conv2d_forward(c.block_inputs[bi].data(), p.conv_w[bi].data(), p.conv_b[bi].data(),
                             d, c.conv_pre[bi].data());
        std::vector<double> act = c.conv_pre[bi];
        kern::relu_forward(act.data(), act.size());
        c.block_inputs[bi + 1].resize(static_cast<size_t>(n) * g.c_out * g.out_size * g.out_size);
        kern::avgpool2_forward(act.data(), n, g.c_out, g.conv_size, g.conv_size,
                               c.block_inputs[bi + 1].data());
    }

    const auto& last = geo.back();
    const int d_emb = p.cfg.embedding_dim();
    c.gap_out.resize(static_cast<size_t>(n) * d_emb);
    kern::gap_forward(c.block_inputs.back().data(), n, last.c_out, last.out_size, last.out_size,
                      c.gap_out.data());

    c.p1_pre.resize(static_cast<size_t>(n) * p.cfg.proj_hidden);
    kern::affine_forward(c.gap_out.data(), n, d_emb, p.p1_w.data(), p.p1_b.data(),
                         p.cfg.proj_hidden, c.p1_pre.data());
    c.p1_act = c.p1_pre;
    kern::relu_forward(c.p1_act.data(), c.p1_act.size());

    projections.resize(static_cast<size_t>(n) * p.cfg.proj_dim);
    kern::affine_forward(c.p1_act.data(), n, p.cfg.proj_hidden, p.p2_w.data(), p.p2_b.data(),
                         p.cfg.proj_dim, projections.data());
}

void encoder_embed_forward(const EncoderParams& p, std::span<const double> batch, int n,
                           std::vector<double>& embeddings) {
    const auto geo = block_geometry(p.cfg);
    const size_t in_elems = static_cast<size_t>(n) * 3 * p.cfg.input_size * p.cfg.input_size;
    if (batch.size() != in_elems) throw std::invalid_argument("encoder input shape mismatch");

    std::vector<double> cur(batch.begin(), batch.end());
    for (size_t bi = 0; bi < geo.size(); ++bi) {
        const auto& g = geo[bi];
        const auto d =
            kern::conv2d_dims(n, g.c_in, g.in_size, g.in_size, g.c_out, p.cfg.blocks[bi].stride);
        std::vector<double> conv(static_cast<size_t>(n) * g.c_out * g.conv_size * g.conv_size);
        kern::conv2d_forward(cur.data(), p.conv_w[bi].data(), p.conv_b[bi].data(), d, conv.data());
        kern::relu_forward(conv.data(), conv.size());
        cur.resize(static_cast<size_t>(n) * g.c_out * g.out_size * g.out_size);
        kern::avgpool2_forward(conv.data(), n, g.c_out, g.conv_size, g.conv_size, cur.data());
    }
    const auto& last = geo.back();
    embeddings.resize(static_cast<size_t>(n) * p.cfg.embedding_dim());
    kern::gap_forward(cur.data(), n, last.c_out, last.out_size, last.out_size, embeddings.data());
}

EncoderGrads zero_grads(const EncoderParams& p) {
    EncoderGrads g;
    for (const auto& w : p.conv_w) g.conv_w.emplace_back(w.size(), 0.0);
    for (const auto& b : p.conv_b) g.conv_b.emplace_back(b.size(), 0.0);
    g.p1_w.assign(p.p1_w.size(), 0.0);
    g.p1_b.assign(p.p1_b.size(), 0.0);
    g.p2_w.assign(p.p2_w.size(), 0.0);
    g.p2_b.assign(p.p2_b.size(), 0.0);
    return g;
}

void encoder_backward(const EncoderParams& p, const ForwardCache& c, std::span<const double> d_proj,
                      EncoderGrads& grads) {
    const auto geo = block_geometry(p.cfg);
    const int n = c.n;
    const int d_emb = p.cfg.embedding_dim();

    // projection head
    kern::affine_backward_params(d_proj.data(), c.p1_act.data(), n, p.cfg.proj_hidden,
                                 p.cfg.proj_dim, grads.p2_w.data(), grads.p2_b.data());
    std::vector<double> d_p1(static_cast<size_t>(n) * p.cfg.proj_hidden);
    kern::affine_backward_input(d_proj.data(), p.p2_w.data(), n, p.cfg.proj_hidden, p.cfg.proj_dim,
                                d_p1.data());
    kern::relu_backward(c.p1_pre.data(), d_p1.data(), d_p1.size());
    kern::affine_backward_params(d_p1.data(), c.gap_out.data(), n, d_emb, p.cfg.proj_hidden,
                                 grads.p1_w.data(), grads.p1_b.data());
    std::vector<double> d_gap(static_cast<size_t>(n) * d_emb);
    kern::affine_backward_input(d_p1.data(), p.p1_w.data(), n, d_emb, p.cfg.proj_hidden,
                                d_gap.data());

    const auto& last = geo.back();
    std::vector<double> d_cur(static_cast<size_t>(n) * last.c_out * last.out_size * last.out_size);
    kern::gap_backward(d_gap.data(), n, last.c_out, last.out_size, last.out_size, d_cur.data());

    for (int bi = static_cast<int>(geo.size()) - 1; bi >= 0; --bi) {
        const auto& g = geo[static_cast<size_t>(bi)];
        std::vector<double> d_conv(static_cast<size_t>(n) * g.c_out * g.conv_size * g.conv_size);
        kern::avgpool2_backward(d_cur.data(), n, g.c_out, g.conv_size, g.conv_size, d_conv.data());
        kern::relu_backward(c.conv_pre[static_cast<size_t>(bi)].data(), d_conv.data(),
                            d_conv.size());
        const auto d = kern::conv2d_dims(n, g.c_in, g.in_size, g.in_size, g.c_out,
                                         p.cfg.blocks[static_cast<size_t>(bi)].stride);
        kern::conv2d_backward_params(d_conv.data(), c.block_inputs[static_cast<size_t>(bi)].data(),
                                     d, grads.conv_w[static_cast<size_t>(bi)].data(),
                                     grads.conv_b[static_cast<size_t>(bi)].data());
        if (bi > 0) {
            d_cur.resize(static_cast<size_t>(n) * g.c_in * g.in_size * g.in_size);
            kern::conv2d_backward_input(d_conv.data(), p.conv_w[static_cast<size_t>(bi)].data(), d,
                                        d_cur.data());
        }
    }
}

NtXentResult nt_xent_loss(std::span<const double> projections, int two_n, int dim, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("tau must be > 0");
    if (two_n < 4 || two_n % 2 != 0)
        throw std::invalid_argument("need 2N views with N >= 2");
    if (projections.size() != static_cast<size_t>(two_n) * dim)
        throw std::invalid_argument("projection shape mismatch");
    const int half = two_n / 2;

    std::vector<double> norms(static_cast<size_t>(two_n));
    std::vector<double> u(projections.size());
    for (int i = 0; i < two_n; ++i) {
        const double* z = projections.data() + static_cast<size_t>(i) * dim;
        double sq = 0.0;
        for (int k = 0; k < dim; ++k) sq += z[k] * z[k];
        const double nrm = std::sqrt(sq);
        if (nrm < 1e-12) throw std::invalid_argument("zero-norm projection row");
        norms[static_cast<size_t>(i)] = nrm;
        for (int k = 0; k < dim; ++k) u[static_cast<size_t>(i) * dim + k] = z[k] / nrm;
    }

    std::vector<double> sim(static_cast<size_t>(two_n) * two_n);
    kern::pairwise_dot(u.data(), two_n, dim, sim.data());

    // softmax over the 2N-1 candidates per row; G = dL/d(sim) with zero diag
    std::vector<double> g(static_cast<size_t>(two_n) * two_n, 0.0);
    double loss = 0.0;
    const double inv_views = 1.0 / two_n;
    for (int i = 0; i < two_n; ++i) {
        const int pos = i < half ? i + half : i - half;
        const double* srow = sim.data() + static_cast<size_t>(i) * two_n;
        double mx = -1e300;
        for (int j = 0; j < two_n; ++j)
            if (j != i) mx = std::max(mx, srow[j] / tau);
        double denom = 0.0;
        for (int j = 0; j < two_n; ++j)
            if (j != i) denom += std::exp(srow[j] / tau - mx);
        loss += -(srow[pos] / tau - mx - std::log(denom)) * inv_views;
        double* grow = g.data() + static_cast<size_t>(i) * two_n;
        for (int j = 0; j < two_n; ++j) {
            if (j == i) continue;
            const double soft = std::exp(srow[j] / tau - mx) / denom;
            grow[j] = (soft - (j == pos ? 1.0 : 0.0)) * inv_views / tau;
        }
    }

    // dL/du_a = sum_j (G[a][j] + G[j][a]) u_j, then pull back through the
    // normalization: dL/dz = (dL/du - (dL/du . u) u) / ||z||
    NtXentResult out;
    out.loss = loss;
    out.grad.assign(projections.size(), 0.0);
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (int a = 0; a < two_n; ++a) {
        std::vector<double> du(static_cast<size_t>(dim), 0.0);
        for (int j = 0; j < two_n; ++j) {
            const double w = g[static_cast<size_t>(a) * two_n + j] +
                             g[static_cast<size_t>(j) * two_n + a];
            if (w == 0.0) continue;
            const double* uj = u.data() + static_cast<size_t>(j) * dim;
            for (int k = 0; k < dim; ++k) du[static_cast<size_t>(k)] += w * uj[k];
        }
        const double* ua = u.data() + static_cast<size_t>(a) * dim;
        double proj_coeff = 0.0;
        for (int k = 0; k < dim; ++k) proj_coeff += du[static_cast<size_t>(k)] * ua[k];
        double* gz = out.grad.data() + static_cast<size_t>(a) * dim;
        for (int k = 0; k < dim; ++k)
            gz[k] = (du[static_cast<size_t>(k)] - proj_coeff * ua[k]) / norms[static_cast<size_t>(a)];
    }
    return out;
}

void tile_to_input(const ImageU8& tile, std::span<double> dst) {
    const int s = tile.width;
    if (tile.height != s || dst.size() != static_cast<size_t>(3) * s * s)
        throw std::invalid_argument("tile/input shape mismatch");
    // centered at mid-gray: the DC component of near-uniform histology tiles
    // otherwise dominates the pooled features and stalls contrastive training
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                dst[(static_cast<size_t>(c) * s + y) * s + x] =
                    tile.px(x, y)[c] / 255.0 - 0.5;
}

namespace {

void sgd_step(EncoderParams& p, EncoderGrads& g, std::vector<std::vector<double>>& velocity,
              double lr, double momentum) {
    auto pa = p.arrays();
    auto ga = g.arrays();
    if (velocity.empty()) {
        for (const auto* arr : pa) velocity.emplace_back(arr->size(), 0.0);
    }
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

// Builds the 2N-view input buffer for a batch of source tiles. Views i and
// i+N come from tile i; per-view augmentation streams derive from the seed so
// assembly can run in parallel without affecting bytes.
void assemble_views(const std::vector<ImageU8>& tiles, const std::vector<size_t>& idx,
                    const AugmentationConfig& aug, uint64_t stream_base, uint64_t seed,
                    std::vector<double>& buf, int input_elems) {
    const int n = static_cast<int>(idx.size());
    buf.resize(static_cast<size_t>(2 * n) * input_elems);
    const long long views = 2LL * n;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long v = 0; v < views; ++v) {
        const int src = static_cast<int>(v % n);
        const int which = static_cast<int>(v / n);
        Rng rng(derive_seed(seed, stream_base + static_cast<uint64_t>(src) * 2 +
                                      static_cast<uint64_t>(which)));
        const ImageU8 view = augment(tiles[idx[static_cast<size_t>(src)]], aug, rng);
        tile_to_input(view, {buf.data() + static_cast<size_t>(v) * input_elems,
                             static_cast<size_t>(input_elems)});
    }
}

} // namespace

PretrainResult train_contrastive(const std::vector<ImageU8>& tiles, const PretrainConfig& cfg) {
    if (cfg.batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
    if (tiles.size() < 2 * static_cast<size_t>(cfg.batch_size))
        throw std::invalid_argument("insufficient tiles: need at least 2 x batch_size");
    if (cfg.epochs < 0 || cfg.lr < 0) throw std::invalid_argument("bad training config");
    if (cfg.aug.max_color_jitter < 0.0 || cfg.aug.max_color_jitter >= 1.0 ||
        cfg.aug.noise_variance < 0.0)
        throw std::invalid_argument("bad augmentation config");
    // view assembly runs inside a parallel region; shape errors must not
    // originate there
    for (const auto& t : tiles)
        if (t.width != cfg.encoder.input_size || t.height != cfg.encoder.input_size)
            throw std::invalid_argument("tile size does not match encoder input size");

    const int input_elems = 3 * cfg.encoder.input_size * cfg.encoder.input_size;

    // 80/20 tile split
    std::vector<size_t> order(tiles.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(cfg.seed, 0x5EED5));
    split_rng.shuffle(order);
    const size_t n_train = static_cast<size_t>(std::floor(0.8 * static_cast<double>(tiles.size())));
    std::vector<size_t> train_idx(order.begin(), order.begin() + static_cast<long>(n_train));
    std::vector<size_t> val_idx(order.begin() + static_cast<long>(n_train), order.end());

    PretrainResult result;
    result.params = init_encoder(cfg.encoder, derive_seed(cfg.seed, 0x1217));
    std::vector<std::vector<double>> velocity;

    std::vector<double> batch_buf, projections;
    ForwardCache cache;

    auto eval_split_loss = [&](const std::vector<size_t>& idx, uint64_t stream_tag) {
        if (idx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        double total = 0.0;
        int batches = 0;
        for (size_t off = 0; off < idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t take = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - off);
            if (take < 2) break;
            std::vector<size_t> chunk(idx.begin() + static_cast<long>(off),
                                      idx.begin() + static_cast<long>(off + take));
            // fixed augmentation streams so the curve is comparable across epochs
            assemble_views(tiles, chunk, cfg.aug, stream_tag + off * 4, cfg.seed, batch_buf,
                           input_elems);
            encoder_forward(result.params, batch_buf, static_cast<int>(2 * take), projections,
                            nullptr);
            total += nt_xent_loss(projections, static_cast<int>(2 * take), cfg.encoder.proj_dim,
                                  cfg.tau)
                         .loss;
            ++batches;
        }
        return batches ? total / batches : std::numeric_limits<double>::quiet_NaN();
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng epoch_rng(derive_seed(cfg.seed, 0xB000 + static_cast<uint64_t>(epoch)));
        epoch_rng.shuffle(train_idx);
        const size_t batches = train_idx.size() / static_cast<size_t>(cfg.batch_size);
        double epoch_loss = 0.0;
        for (size_t b = 0; b < batches; ++b) {
            std::vector<size_t> chunk(
                train_idx.begin() + static_cast<long>(b * cfg.batch_size),
                train_idx.begin() + static_cast<long>((b + 1) * cfg.batch_size));
            const uint64_t stream =
                (static_cast<uint64_t>(epoch + 1) << 40) + (static_cast<uint64_t>(b) << 20);
            assemble_views(tiles, chunk, cfg.aug, stream, cfg.seed, batch_buf, input_elems);
            encoder_forward(result.params, batch_buf, 2 * cfg.batch_size, projections, &cache);
            auto nt = nt_xent_loss(projections, 2 * cfg.batch_size, cfg.encoder.proj_dim, cfg.tau);
            epoch_loss += nt.loss;
            EncoderGrads grads = zero_grads(result.params);
            encoder_backward(result.params, cache, nt.grad, grads);
            sgd_step(result.params, grads, velocity, cfg.lr, cfg.momentum);
        }
        result.curve.train.push_back(batches ? epoch_loss / static_cast<double>(batches)
                                             : std::numeric_limits<double>::quiet_NaN());
        result.curve.val.push_back(eval_split_loss(val_idx, 0x56A100000000ull));
    }
    return result;
}

EmbeddingStore embed_tiles(const EncoderParams& p, const std::vector<qc::Tile>& tiles) {
    EmbeddingStore store;
    store.dim = static_cast<uint32_t>(p.embedding_dim());
    store.records.resize(tiles.size());
    for (const auto& t : tiles)
        if (t.pixels.width != p.cfg.input_size || t.pixels.height != p.cfg.input_size)
            throw std::invalid_argument("tile size does not match encoder input size");
    const int input_elems = 3 * p.cfg.input_size * p.cfg.input_size;
    const long long n = static_cast<long long>(tiles.size());
    std::atomic<bool> bad{false};
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long i = 0; i < n; ++i) {
        const auto& t = tiles[static_cast<size_t>(i)];
        std::vector<double> input(static_cast<size_t>(input_elems));
        tile_to_input(t.pixels, input);
        std::vector<double> emb;
        encoder_embed_forward(p, input, 1, emb);
        EmbeddingRecord rec;
        rec.specimen_id = t.specimen_id;
        rec.grid_x = static_cast<uint32_t>(t.grid_x);
        rec.grid_y = static_cast<uint32_t>(t.grid_y);
        rec.vec.resize(emb.size());
        for (size_t k = 0; k < emb.size(); ++k) {
            const auto f = static_cast<float>(emb[k]);
            if (!std::isfinite(f)) bad.store(true, std::memory_order_relaxed);
            rec.vec[k] = f;
        }
        store.records[static_cast<size_t>(i)] = std::move(rec);
    }
    if (bad.load()) throw std::runtime_error("non-finite embedding value");
    return store;
}

void write_embedding_store(const EmbeddingStore& store, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write("EMB1", 4);
    binio::put<uint32_t>(f, store.version);
    binio::put<uint32_t>(f, store.dim);
    binio::put<uint64_t>(f, store.records.size());
    for (const auto& r : store.records) {
        if (r.vec.size() != store.dim) throw std::runtime_error("embedding dim mismatch");
        binio::put_string(f, r.specimen_id);
        binio::put<uint32_t>(f, r.grid_x);
        binio::put<uint32_t>(f, r.grid_y);
        for (const float v : r.vec) binio::put<float>(f, v);
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

EmbeddingStore read_embedding_store(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    binio::expect_magic(f, "EMB1");
    EmbeddingStore store;
    store.version = binio::get<uint32_t>(f);
    store.dim = binio::get<uint32_t>(f);
    const auto count = binio::get<uint64_t>(f);
    store.records.resize(count);
    for (auto& r : store.records) {
        r.specimen_id = binio::get_string(f);
        r.grid_x = binio::get<uint32_t>(f);
        r.grid_y = binio::get<uint32_t>(f);
        r.vec.resize(store.dim);
        for (auto& v : r.vec) {
            v = binio::get<float>(f);
            if (!std::isfinite(v)) throw std::runtime_error("non-finite embedding in store");
        }
    }
    return store;
}

void save_encoder(const EncoderParams& p, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write("ENC1", 4);
    binio::put<uint32_t>(f, 1);
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.input_size));
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.blocks.size()));
    for (const auto& b : p.cfg.blocks) {
        binio::put<uint32_t>(f, static_cast<uint32_t>(b.out_channels));
        binio::put<uint32_t>(f, static_cast<uint32_t>(b.stride));
    }
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.proj_hidden));
    binio::put<uint32_t>(f, static_cast<uint32_t>(p.cfg.proj_dim));
    binio::put_string(f, p.init.scheme);
    binio::put<uint64_t>(f, p.init.seed);
    for (const auto* arr : p.arrays()) binio::put_doubles(f, *arr);
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

EncoderParams load_encoder(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    binio::expect_magic(f, "ENC1");
    const auto version = binio::get<uint32_t>(f);
    if (version != 1) throw std::runtime_error("unsupported encoder version");
    EncoderConfig cfg;
    cfg.input_size = static_cast<int>(binio::get<uint32_t>(f));
    const auto n_blocks = binio::get<uint32_t>(f);
    cfg.blocks.clear();
    for (uint32_t i = 0; i < n_blocks; ++i) {
        ConvBlockSpec b;
        b.out_channels = static_cast<int>(binio::get<uint32_t>(f));
        b.stride = static_cast<int>(binio::get<uint32_t>(f));
        cfg.blocks.push_back(b);
    }
    cfg.proj_hidden = static_cast<int>(binio::get<uint32_t>(f));
    cfg.proj_dim = static_cast<int>(binio::get<uint32_t>(f));
    InitRecord init;
    init.scheme = binio::get_string(f);
    init.seed = binio::get<uint64_t>(f);
    EncoderParams p = init_encoder(cfg, init.seed);
    p.init = init;
    for (auto* arr : p.arrays()) binio::get_doubles(f, *arr);
    return p;
}

} // namespace concordia::features
