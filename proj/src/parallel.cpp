#include "concordia/parallel.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace concordia::par {

namespace {
int g_cap = 0;

int env_cap() {
    static int cached = [] {
        const char* v = std::getenv("CONCORDIA_THREADS");
        if (!v) return 0;
        try {
            const int n = std::stoi(v);
            return n > 0 ? n : 0;
        } catch (...) {
            return 0;
        }
    }();
    return cached;
}
} // namespace

int max_threads() {
#ifdef _OPENMP
    int n = omp_get_max_threads();
#else
    int n = 1;
#endif
    if (const int e = env_cap(); e > 0 && e < n) n = e;
    if (g_cap > 0 && g_cap < n) n = g_cap;
    return n < 1 ? 1 : n;
}

void set_thread_cap(int n) { g_cap = n; }

} // namespace concordia::par
