#include "bridgeseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bridgeseg {

namespace {
int g_threads = 0;
thread_local bool t_in_worker = false;
}

void set_thread_count(int n) {
    g_threads = n < 0 ? 0 : n;
}

int thread_count() {
    if (g_threads > 0) return g_threads;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(int64_t n_chunks, const std::function<void(int64_t)>& fn) {
    if (n_chunks <= 0) return;
    // Nested calls run inline; the outer level owns the worker pool.
    int workers = t_in_worker ? 1 : static_cast<int>(std::min<int64_t>(thread_count(), n_chunks));
    if (workers <= 1) {
        for (int64_t i = 0; i < n_chunks; ++i) fn(i);
        return;
    }

    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto body = [&] {
        t_in_worker = true;
        for (;;) {
            int64_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= n_chunks) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
        t_in_worker = false;
    };

    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

void parallel_blocks(int64_t n, int64_t grain,
                     const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (grain <= 0) grain = 1;
    int64_t blocks = (n + grain - 1) / grain;
    parallel_for(blocks, [&](int64_t b) {
        int64_t begin = b * grain;
        int64_t end = std::min<int64_t>(begin + grain, n);
        fn(begin, end);
    });
}

}  // namespace bridgeseg
