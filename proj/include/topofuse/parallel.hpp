#ifndef TOPOFUSE_PARALLEL_HPP
#define TOPOFUSE_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace topofuse {

namespace detail {
inline std::atomic<int>& thread_cap() {
    static std::atomic<int> cap{1};
    return cap;
}
}

/** Caps the number of worker threads used by `parallel_for`. Values below 1 are treated as 1. */
inline void set_max_threads(int n) { detail::thread_cap().store(std::max(1, n)); }

inline int max_threads() { return detail::thread_cap().load(); }

/**
 * Runs `fn(i)` for every i in [0, n), splitting the range into contiguous blocks.
 * Each index is processed by exactly one worker, so callers that write only to slot i
 * get results that do not depend on the thread count.
 */
template<class Function>
void parallel_for(std::size_t n, Function fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr failure;
    std::mutex failure_lock;
    const std::size_t block = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t start = w * block;
        const std::size_t end = std::min(n, start + block);
        pool.emplace_back([start, end, &fn, &failure, &failure_lock]() {
            try {
                for (std::size_t i = start; i < end; ++i) {
                    fn(i);
                }
            } catch (...) {
                std::lock_guard<std::mutex> guard(failure_lock);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

}

#endif
