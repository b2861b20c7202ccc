#include "concordia/kernels.hpp"

#include <stdexcept>

#include "concordia/parallel.hpp"

namespace concordia::kern {

Conv2dDims conv2d_dims(int n, int c_in, int h, int w, int c_out, int stride) {
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    Conv2dDims d{n, c_in, h, w, c_out, stride, 0, 0};
    d.h_out = (h - 1) / stride + 1;
    d.w_out = (w - 1) / stride + 1;
    return d;
}

namespace {

// One output cell of the 3x3 pad-1 convolution. Shared by the serial and
// OpenMP drivers so both paths accumulate in the same order.
inline double conv_cell(const double* in, const double* wt, const double* bias,
                        const Conv2dDims& d, int n, int co, int oy, int ox) {
    const int iy0 = oy * d.stride - 1;
    const int ix0 = ox * d.stride - 1;
    double acc = bias ? bias[co] : 0.0;
    for (int ci = 0; ci < d.c_in; ++ci) {
        const double* plane = in + ((static_cast<size_t>(n) * d.c_in + ci) * d.h) * d.w;
        const double* k = wt + (static_cast<size_t>(co) * d.c_in + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= d.h) continue;
            const double* row = plane + static_cast<size_t>(iy) * d.w;
            for (int kx = 0; kx < 3; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= d.w) continue;
                acc += k[ky * 3 + kx] * row[ix];
            }
        }
    }
    return acc;
}

inline double conv_input_grad_cell(const double* d_out, const double* wt, const Conv2dDims& d,
                                   int n, int ci, int iy, int ix) {
    double acc = 0.0;
    for (int co = 0; co < d.c_out; ++co) {
        const double* gplane =
            d_out + ((static_cast<size_t>(n) * d.c_out + co) * d.h_out) * d.w_out;
        const double* k = wt + (static_cast<size_t>(co) * d.c_in + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const int num_y = iy + 1 - ky;
            if (num_y < 0 || num_y % d.stride != 0) continue;
            const int oy = num_y / d.stride;
            if (oy >= d.h_out) continue;
            for (int kx = 0; kx < 3; ++kx) {
                const int num_x = ix + 1 - kx;
                if (num_x < 0 || num_x % d.stride != 0) continue;
                const int ox = num_x / d.stride;
                if (ox >= d.w_out) continue;
                acc += k[ky * 3 + kx] * gplane[static_cast<size_t>(oy) * d.w_out + ox];
            }
        }
    }
    return acc;
}

inline double conv_weight_grad_cell(const double* d_out, const double* in, const Conv2dDims& d,
                                    int co, int ci, int ky, int kx) {
    double acc = 0.0;
    for (int n = 0; n < d.n; ++n) {
        const double* gplane =
            d_out + ((static_cast<size_t>(n) * d.c_out + co) * d.h_out) * d.w_out;
        const double* plane = in + ((static_cast<size_t>(n) * d.c_in + ci) * d.h) * d.w;
        for (int oy = 0; oy < d.h_out; ++oy) {
            const int iy = oy * d.stride - 1 + ky;
            if (iy < 0 || iy >= d.h) continue;
            const double* grow = gplane + static_cast<size_t>(oy) * d.w_out;
            const double* row = plane + static_cast<size_t>(iy) * d.w;
            for (int ox = 0; ox < d.w_out; ++ox) {
                const int ix = ox * d.stride - 1 + kx;
                if (ix < 0 || ix >= d.w) continue;
                acc += grow[ox] * row[ix];
            }
        }
    }
    return acc;
}

inline double conv_bias_grad_cell(const double* d_out, const Conv2dDims& d, int co) {
    double acc = 0.0;
    for (int n = 0; n < d.n; ++n) {
        const double* gplane =
            d_out + ((static_cast<size_t>(n) * d.c_out + co) * d.h_out) * d.w_out;
        const size_t m = static_cast<size_t>(d.h_out) * d.w_out;
        for (size_t i = 0; i < m; ++i) acc += gplane[i];
    }
    return acc;
}

inline double affine_cell(const double* x, const double* w, const double* b, int d_in, int n,
                          int o) {
    const double* xr = x + static_cast<size_t>(n) * d_in;
    const double* wr = w + static_cast<size_t>(o) * d_in;
    double acc = b ? b[o] : 0.0;
    for (int i = 0; i < d_in; ++i) acc += xr[i] * wr[i];
    return acc;
}

inline double dot(const double* a, const double* b, int d) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += a[i] * b[i];
    return acc;
}

} // namespace

void conv2d_forward(const double* in, const double* wt, const double* bias, const Conv2dDims& d,
                    double* out) {
    const long long planes = static_cast<long long>(d.n) * d.c_out;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / d.c_out);
        const int co = static_cast<int>(plane % d.c_out);
        double* dst = out + plane * d.h_out * d.w_out;
        for (int oy = 0; oy < d.h_out; ++oy)
            for (int ox = 0; ox < d.w_out; ++ox)
                *dst++ = conv_cell(in, wt, bias, d, n, co, oy, ox);
    }
}

void conv2d_backward_input(const double* d_out, const double* wt, const Conv2dDims& d,
                           double* d_in) {
    const long long planes = static_cast<long long>(d.n) * d.c_in;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / d.c_in);
        const int ci = static_cast<int>(plane % d.c_in);
        double* dst = d_in + plane * d.h * d.w;
        for (int iy = 0; iy < d.h; ++iy)
            for (int ix = 0; ix < d.w; ++ix)
                *dst++ = conv_input_grad_cell(d_out, wt, d, n, ci, iy, ix);
    }
}

void conv2d_backward_params(const double* d_out, const double* in, const Conv2dDims& d,
                            double* d_wt, double* d_bias) {
    const long long total = static_cast<long long>(d.c_out) * d.c_in * 9;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int kx = static_cast<int>(idx % 3);
        const int ky = static_cast<int>((idx / 3) % 3);
        const int ci = static_cast<int>((idx / 9) % d.c_in);
        const int co = static_cast<int>(idx / (9LL * d.c_in));
        d_wt[idx] = conv_weight_grad_cell(d_out, in, d, co, ci, ky, kx);
    }
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (int co = 0; co < d.c_out; ++co) d_bias[co] = conv_bias_grad_cell(d_out, d, co);
}

void avgpool2_forward(const double* in, int n, int c, int h, int w, double* out) {
    const int ho = h / 2, wo = w / 2;
    const long long total = static_cast<long long>(n) * c * ho * wo;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int ox = static_cast<int>(idx % wo);
        const int oy = static_cast<int>((idx / wo) % ho);
        const long long plane = idx / (static_cast<long long>(wo) * ho);
        const double* p = in + (plane * h + 2LL * oy) * w + 2LL * ox;
        out[idx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
    }
}

void avgpool2_backward(const double* d_out, int n, int c, int h, int w, double* d_in) {
    const int ho = h / 2, wo = w / 2;
    const long long total = static_cast<long long>(n) * c * h * w;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int ix = static_cast<int>(idx % w);
        const int iy = static_cast<int>((idx / w) % h);
        const long long plane = idx / (static_cast<long long>(w) * h);
        d_in[idx] = 0.25 * d_out[(plane * ho + iy / 2) * wo + ix / 2];
    }
}

void relu_forward(double* x, size_t n) {
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i)
        if (x[i] < 0.0) x[i] = 0.0;
}

void relu_backward(const double* x_pre, double* grad, size_t n) {
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i)
        if (x_pre[i] <= 0.0) grad[i] = 0.0;
}

void gap_forward(const double* in, int n, int c, int h, int w, double* out) {
    const long long total = static_cast<long long>(n) * c;
    const double inv = 1.0 / (static_cast<double>(h) * w);
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const double* p = in + idx * h * w;
        double acc = 0.0;
        for (int i = 0; i < h * w; ++i) acc += p[i];
        out[idx] = acc * inv;
    }
}

void gap_backward(const double* d_out, int n, int c, int h, int w, double* d_in) {
    const long long total = static_cast<long long>(n) * c * h * w;
    const double inv = 1.0 / (static_cast<double>(h) * w);
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx)
        d_in[idx] = d_out[idx / (static_cast<long long>(h) * w)] * inv;
}

void affine_forward(const double* x, int n, int d_in, const double* w, const double* b, int d_out,
                    double* y) {
    const long long total = static_cast<long long>(n) * d_out;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int o = static_cast<int>(idx % d_out);
        const int r = static_cast<int>(idx / d_out);
        y[idx] = affine_cell(x, w, b, d_in, r, o);
    }
}

void affine_backward_input(const double* d_y, const double* w, int n, int d_in, int d_out,
                           double* d_x) {
    const long long total = static_cast<long long>(n) * d_in;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int i = static_cast<int>(idx % d_in);
        const int r = static_cast<int>(idx / d_in);
        const double* gy = d_y + static_cast<size_t>(r) * d_out;
        double acc = 0.0;
        for (int o = 0; o < d_out; ++o) acc += gy[o] * w[static_cast<size_t>(o) * d_in + i];
        d_x[idx] = acc;
    }
}

void affine_backward_params(const double* d_y, const double* x, int n, int d_in, int d_out,
                            double* d_w, double* d_b) {
    const long long total = static_cast<long long>(d_out) * d_in;
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (long long idx = 0; idx < total; ++idx) {
        const int i = static_cast<int>(idx % d_in);
        const int o = static_cast<int>(idx / d_in);
        double acc = 0.0;
        for (int r = 0; r < n; ++r)
            acc += d_y[static_cast<size_t>(r) * d_out + o] * x[static_cast<size_t>(r) * d_in + i];
        d_w[idx] = acc;
    }
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (int o = 0; o < d_out; ++o) {
        double acc = 0.0;
        for (int r = 0; r < n; ++r) acc += d_y[static_cast<size_t>(r) * d_out + o];
        d_b[o] = acc;
    }
}

void pairwise_dot(const double* u, int n, int d, double* s) {
#pragma omp parallel for num_threads(par::max_threads()) schedule(static)
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            s[static_cast<size_t>(i) * n + j] =
                dot(u + static_cast<size_t>(i) * d, u + static_cast<size_t>(j) * d, d);
}

// ---------------------------------------------------------------------------
// Serial reference
// ---------------------------------------------------------------------------

namespace ref {

void conv2d_forward(const double* in, const double* wt, const double* bias, const Conv2dDims& d,
                    double* out) {
    size_t idx = 0;
    for (int n = 0; n < d.n; ++n)
        for (int co = 0; co < d.c_out; ++co)
            for (int oy = 0; oy < d.h_out; ++oy)
                for (int ox = 0; ox < d.w_out; ++ox) out[idx++] = conv_cell(in, wt, bias, d, n, co, oy, ox);
}

void conv2d_backward_input(const double* d_out, const double* wt, const Conv2dDims& d,
                           double* d_in) {
    size_t idx = 0;
    for (int n = 0; n < d.n; ++n)
        for (int ci = 0; ci < d.c_in; ++ci)
            for (int iy = 0; iy < d.h; ++iy)
                for (int ix = 0; ix < d.w; ++ix)
                    d_in[idx++] = conv_input_grad_cell(d_out, wt, d, n, ci, iy, ix);
}

void conv2d_backward_params(const double* d_out, const double* in, const Conv2dDims& d,
                            double* d_wt, double* d_bias) {
    size_t idx = 0;
    for (int co = 0; co < d.c_out; ++co)
        for (int ci = 0; ci < d.c_in; ++ci)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    d_wt[idx++] = conv_weight_grad_cell(d_out, in, d, co, ci, ky, kx);
    for (int co = 0; co < d.c_out; ++co) d_bias[co] = conv_bias_grad_cell(d_out, d, co);
}

void avgpool2_forward(const double* in, int n, int c, int h, int w, double* out) {
    const int ho = h / 2, wo = w / 2;
    size_t idx = 0;
    for (long long plane = 0; plane < static_cast<long long>(n) * c; ++plane)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                const double* p = in + (plane * h + 2LL * oy) * w + 2LL * ox;
                out[idx++] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
            }
}

void avgpool2_backward(const double* d_out, int n, int c, int h, int w, double* d_in) {
    const int ho = h / 2, wo = w / 2;
    size_t idx = 0;
    for (long long plane = 0; plane < static_cast<long long>(n) * c; ++plane)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix)
                d_in[idx++] = 0.25 * d_out[(plane * ho + iy / 2) * wo + ix / 2];
}

void gap_forward(const double* in, int n, int c, int h, int w, double* out) {
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (long long idx = 0; idx < static_cast<long long>(n) * c; ++idx) {
        const double* p = in + idx * h * w;
        double acc = 0.0;
        for (int i = 0; i < h * w; ++i) acc += p[i];
        out[idx] = acc * inv;
    }
}

void gap_backward(const double* d_out, int n, int c, int h, int w, double* d_in) {
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (long long idx = 0; idx < static_cast<long long>(n) * c * h * w; ++idx)
        d_in[idx] = d_out[idx / (static_cast<long long>(h) * w)] * inv;
}

void affine_forward(const double* x, int n, int d_in, const double* w, const double* b, int d_out,
                    double* y) {
    size_t idx = 0;
    for (int r = 0; r < n; ++r)
        for (int o = 0; o < d_out; ++o) y[idx++] = affine_cell(x, w, b, d_in, r, o);
}

void affine_backward_input(const double* d_y, const double* w, int n, int d_in, int d_out,
                           double* d_x) {
    size_t idx = 0;
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < d_in; ++i) {
            const double* gy = d_y + static_cast<size_t>(r) * d_out;
            double acc = 0.0;
            for (int o = 0; o < d_out; ++o) acc += gy[o] * w[static_cast<size_t>(o) * d_in + i];
            d_x[idx++] = acc;
        }
}

void affine_backward_params(const double* d_y, const double* x, int n, int d_in, int d_out,
                            double* d_w, double* d_b) {
    size_t idx = 0;
    for (int o = 0; o < d_out; ++o)
        for (int i = 0; i < d_in; ++i) {
            double acc = 0.0;
            for (int r = 0; r < n; ++r)
                acc +=
                    d_y[static_cast<size_t>(r) * d_out + o] * x[static_cast<size_t>(r) * d_in + i];
            d_w[idx++] = acc;
        }
    for (int o = 0; o < d_out; ++o) {
        double acc = 0.0;
        for (int r = 0; r < n; ++r) acc += d_y[static_cast<size_t>(r) * d_out + o];
        d_b[o] = acc;
    }
}

void pairwise_dot(const double* u, int n, int d, double* s) {
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            s[static_cast<size_t>(i) * n + j] =
                dot(u + static_cast<size_t>(i) * d, u + static_cast<size_t>(j) * d, d);
}

} // namespace ref

} // namespace concordia::kern
