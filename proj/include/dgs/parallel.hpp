#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace dgs {

/// Number of worker threads used for pixel-parallel loops. Overridable with
/// the DGS_THREADS environment variable; never affects results, only speed.
inline unsigned hardware_threads() {
    if (const char* env = std::getenv("DGS_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
}

// Reductions accumulate into one slot per chunk and are merged in chunk index
// order, so the chunk count must not depend on the thread count.
inline constexpr std::size_t kReductionChunks = 16;

/// Run fn(chunk_index, begin, end) over [0,total) split into exactly `chunks`
/// contiguous ranges. Threads race only for chunk indices; the decomposition
/// itself is fixed, which keeps reductions deterministic.
template <typename Fn>
void parallel_chunks(std::size_t total, std::size_t chunks, Fn&& fn) {
    if (total == 0) return;
    chunks = std::min(chunks, total);
    const std::size_t per = (total + chunks - 1) / chunks;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= chunks) return;
            const std::size_t begin = c * per;
            const std::size_t end = std::min(total, begin + per);
            if (begin < end) fn(c, begin, end);
        }
    };
    const unsigned nthreads = std::min<std::size_t>(hardware_threads(), chunks);
    if (nthreads <= 1) {
        worker();
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nthreads - 1);
    for (unsigned i = 1; i < nthreads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
}

}  // namespace dgs
