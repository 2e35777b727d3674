#pragma once

#include <cstdint>
#include <functional>

namespace mutr {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency, capped by the MUTR_THREADS environment variable when set.
int thread_count();

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on a shared
// worker pool. Chunking is a pure function of (n, thread_count()), so results
// are deterministic as long as chunks touch disjoint outputs. Runs inline for
// small n.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace mutr
