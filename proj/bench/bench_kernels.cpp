// Times the OpenMP kernels against the serial reference implementations on
// encoder-shaped workloads and reports the speedup.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "concordia/kernels.hpp"
#include "concordia/parallel.hpp"
#include "concordia/rng.hpp"

using namespace concordia;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return dt / reps;
}

std::vector<double> random_vec(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

void report(const char* name, double serial_s, double parallel_s) {
    std::printf("%-28s serial %9.3f ms   openmp %9.3f ms   speedup %.2fx\n", name,
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s);
}

} // namespace

int main() {
    std::printf("threads: %d\n", par::max_threads());

    {
        const auto d = kern::conv2d_dims(16, 8, 64, 64, 16, 1);
        const auto in = random_vec(static_cast<size_t>(d.n) * d.c_in * d.h * d.w, 1);
        const auto wt = random_vec(static_cast<size_t>(d.c_out) * d.c_in * 9, 2);
        const auto bias = random_vec(static_cast<size_t>(d.c_out), 3);
        std::vector<double> out(static_cast<size_t>(d.n) * d.c_out * d.h_out * d.w_out);
        report("conv2d_forward 16x8x64x64",
               time_of([&] { kern::ref::conv2d_forward(in.data(), wt.data(), bias.data(), d, out.data()); }, 3),
               time_of([&] { kern::conv2d_forward(in.data(), wt.data(), bias.data(), d, out.data()); }, 3));

        std::vector<double> d_in(in.size());
        report("conv2d_backward_input",
               time_of([&] { kern::ref::conv2d_backward_input(out.data(), wt.data(), d, d_in.data()); }, 3),
               time_of([&] { kern::conv2d_backward_input(out.data(), wt.data(), d, d_in.data()); }, 3));

        std::vector<double> d_wt(wt.size()), d_b(bias.size());
        report("conv2d_backward_params",
               time_of([&] { kern::ref::conv2d_backward_params(out.data(), in.data(), d, d_wt.data(), d_b.data()); }, 3),
               time_of([&] { kern::conv2d_backward_params(out.data(), in.data(), d, d_wt.data(), d_b.data()); }, 3));
    }

    {
        const int n = 256, d_in = 512, d_out = 512;
        const auto x = random_vec(static_cast<size_t>(n) * d_in, 4);
        const auto w = random_vec(static_cast<size_t>(d_out) * d_in, 5);
        const auto b = random_vec(static_cast<size_t>(d_out), 6);
        std::vector<double> y(static_cast<size_t>(n) * d_out);
        report("affine_forward 256x512x512",
               time_of([&] { kern::ref::affine_forward(x.data(), n, d_in, w.data(), b.data(), d_out, y.data()); }, 5),
               time_of([&] { kern::affine_forward(x.data(), n, d_in, w.data(), b.data(), d_out, y.data()); }, 5));
    }

    {
        const int n = 256, dim = 64;
        const auto u = random_vec(static_cast<size_t>(n) * dim, 7);
        std::vector<double> s(static_cast<size_t>(n) * n);
        report("pairwise_dot 256x64",
               time_of([&] { kern::ref::pairwise_dot(u.data(), n, dim, s.data()); }, 20),
               time_of([&] { kern::pairwise_dot(u.data(), n, dim, s.data()); }, 20));
    }
    return 0;
}
