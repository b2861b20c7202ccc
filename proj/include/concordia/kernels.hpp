#pragma once

#include <cstddef>

namespace concordia::kern {

// Dense NN kernels used by the encoder and the MIL head. Tensors are flat
// row-major double arrays with explicit dims. Every kernel computes each
// output slot as an independent fixed-order sum, so the OpenMP versions are
// bit-identical to the serial reference regardless of thread count.

/// 3x3 convolution geometry, padding 1.
struct Conv2dDims {
    int n;      // batch
    int c_in;
    int h, w;   // input spatial
    int c_out;
    int stride;
    int h_out, w_out;
};

Conv2dDims conv2d_dims(int n, int c_in, int h, int w, int c_out, int stride);

// in: n x c_in x h x w; wt: c_out x c_in x 3 x 3; bias: c_out
void conv2d_forward(const double* in, const double* wt, const double* bias, const Conv2dDims& d,
                    double* out);
void conv2d_backward_input(const double* d_out, const double* wt, const Conv2dDims& d,
                           double* d_in);
void conv2d_backward_params(const double* d_out, const double* in, const Conv2dDims& d,
                            double* d_wt, double* d_bias);

// 2x2 average pooling with stride 2; h and w must be even.
void avgpool2_forward(const double* in, int n, int c, int h, int w, double* out);
void avgpool2_backward(const double* d_out, int n, int c, int h, int w, double* d_in);

void relu_forward(double* x, size_t n);
// Masks grad in place by sign of the pre-activation input.
void relu_backward(const double* x_pre, double* grad, size_t n);

// global average pool: n x c x h x w -> n x c
void gap_forward(const double* in, int n, int c, int h, int w, double* out);
void gap_backward(const double* d_out, int n, int c, int h, int w, double* d_in);

// y (n x d_out) = x (n x d_in) * w^T + b, with w stored d_out x d_in
void affine_forward(const double* x, int n, int d_in, const double* w, const double* b, int d_out,
                    double* y);
void affine_backward_input(const double* d_y, const double* w, int n, int d_in, int d_out,
                           double* d_x);
void affine_backward_params(const double* d_y, const double* x, int n, int d_in, int d_out,
                            double* d_w, double* d_b);

/// s = u u^T for an n x d matrix (all pairwise dot products).
void pairwise_dot(const double* u, int n, int d, double* s);

/// Serial reference implementations, kept for correctness tests and the
/// kernel benchmark. Same contracts as above.
namespace ref {
void conv2d_forward(const double* in, const double* wt, const double* bias, const Conv2dDims& d,
                    double* out);
void conv2d_backward_input(const double* d_out, const double* wt, const Conv2dDims& d,
                           double* d_in);
void conv2d_backward_params(const double* d_out, const double* in, const Conv2dDims& d,
                            double* d_wt, double* d_bias);
void avgpool2_forward(const double* in, int n, int c, int h, int w, double* out);
void avgpool2_backward(const double* d_out, int n, int c, int h, int w, double* d_in);
void gap_forward(const double* in, int n, int c, int h, int w, double* out);
void gap_backward(const double* d_out, int n, int c, int h, int w, double* d_in);
void affine_forward(const double* x, int n, int d_in, const double* w, const double* b, int d_out,
                    double* y);
void affine_backward_input(const double* d_y, const double* w, int n, int d_in, int d_out,
                           double* d_x);
void affine_backward_params(const double* d_y, const double* x, int n, int d_in, int d_out,
                            double* d_w, double* d_b);
void pairwise_dot(const double* u, int n, int d, double* s);
} // namespace ref

} // namespace concordia::kern
