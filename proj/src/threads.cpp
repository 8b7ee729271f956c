#include "nslnet/threads.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace nsl {

namespace {
std::atomic<int> g_threads{0};  // 0 = not set yet, use hardware concurrency

int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}
}  // namespace

void set_num_threads(int n) {
    g_threads.store(std::max(1, n));
}

int num_threads() {
    int n = g_threads.load();
    return n > 0 ? n : default_threads();
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    const int workers = static_cast<int>(std::min<std::int64_t>(num_threads(), n));
    if (workers <= 1) {
        fn(0, n);
        return;
    }

    // Contiguous chunks; chunk boundaries carry no numeric meaning because
    // each output element is produced by one sequential evaluation.
    const std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers) - 1);
    std::exception_ptr first_error;
    std::atomic<bool> failed{false};

    auto run = [&](std::int64_t begin, std::int64_t end) {
        try {
            fn(begin, end);
        } catch (...) {
            bool expected = false;
            if (failed.compare_exchange_strong(expected, true)) {
                first_error = std::current_exception();
            }
        }
    };

    for (int w = 1; w < workers; ++w) {
        const std::int64_t begin = w * chunk;
        const std::int64_t end = std::min<std::int64_t>(begin + chunk, n);
        if (begin >= end) break;
        pool.emplace_back(run, begin, end);
    }
    run(0, std::min<std::int64_t>(chunk, n));
    for (auto& t : pool) t.join();

    if (failed.load()) std::rethrow_exception(first_error);
}

}  // namespace nsl
