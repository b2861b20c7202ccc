#pragma once

namespace concordia::par {

/// Worker-thread cap: min(OpenMP default, CONCORDIA_THREADS when set).
/// Always >= 1. Parallel regions must not change results; every kernel in
/// this project writes disjoint output slots and reduces in a fixed order,
/// so thread count never affects output bytes.
int max_threads();

/// Programmatic override (0 restores the environment-derived default).
void set_thread_cap(int n);

} // namespace concordia::par
