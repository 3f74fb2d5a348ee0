#pragma once

#include <cstdint>
#include <functional>

namespace vitdw {

// Number of worker threads used by data-parallel kernels. Defaults to the
// hardware concurrency (capped at 16) or the VITDW_THREADS environment
// variable. Results are bitwise independent of the thread count: every output
// element is written by exactly one worker with a fixed inner loop order.
int num_threads();
void set_num_threads(int n);

// Runs fn(begin, end) over a partition of [0, n). Falls back to a direct call
// when n is small or only one thread is configured.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace vitdw
