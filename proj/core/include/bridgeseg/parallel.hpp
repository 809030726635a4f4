#pragma once

#include <cstdint>
#include <functional>

namespace bridgeseg {

// Worker pool size used by parallel_for. 0 selects hardware concurrency.
void set_thread_count(int n);
int thread_count();

// Runs fn(chunk) for chunk in [0, n_chunks). Chunk boundaries are a function
// of the problem only, never of the thread count, and every chunk writes to
// disjoint output, so results are bit-identical for any pool size (including 1).
void parallel_for(int64_t n_chunks, const std::function<void(int64_t)>& fn);

// Convenience: splits [0, n) into fixed blocks of grain elements and calls
// fn(begin, end) per block.
void parallel_blocks(int64_t n, int64_t grain,
                     const std::function<void(int64_t, int64_t)>& fn);

}  // namespace bridgeseg
