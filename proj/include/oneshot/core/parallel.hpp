#pragma once

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace oneshot {

inline std::atomic<int>& thread_count_setting() {
    static std::atomic<int> n{1};
    return n;
}

/// Number of worker threads used by data-parallel loops (>= 1).
inline void set_thread_count(int n) { thread_count_setting() = std::max(1, n); }
inline int thread_count() { return thread_count_setting().load(); }

/// Runs fn(i) for i in [begin, end) over contiguous static chunks. Each index is visited exactly
/// once, so loops that write only to slot i stay deterministic for any thread count.
template <typename Fn>
void parallel_for(int begin, int end, Fn&& fn) {
    const int n = end - begin;
    if (n <= 0) return;
    const int workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (int i = begin; i < end; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const int lo = begin + static_cast<int>(static_cast<long>(n) * w / workers);
        const int hi = begin + static_cast<int>(static_cast<long>(n) * (w + 1) / workers);
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace oneshot
