#pragma once

#include "dgs/manager.hpp"
#include "dgs/partition.hpp"

#include <algorithm>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

namespace dgs {

/// Workload-balance summary of one partition table.
struct BalanceReport {
    std::vector<std::size_t> counts;  // |N_k| per subset
    std::size_t min_count = 0;
    std::size_t max_count = 0;
    double mean_count = 0;
    double overlap_fraction = 0;             // (sum |N_k| - N) / N
    std::vector<std::size_t> memory_bytes;   // per worker, parameters + moments
    std::size_t total_splats = 0;
};

template <typename T>
std::size_t splat_memory_bytes(const Splat<T>& s) {
    // Parameters plus two optimizer moment blocks.
    const std::size_t params = 3 + 3 + 4 + 1 + 3 * s.sh.size();
    return sizeof(SplatId) + 3 * params * sizeof(T);
}

template <typename T>
BalanceReport balance_stats(const PartitionTable<T>& table, std::span<const Splat<T>> splats) {
    BalanceReport report;
    report.total_splats = splats.size();
    std::unordered_map<SplatId, std::size_t> mem;
    for (const auto& s : splats) mem.emplace(s.id, splat_memory_bytes(s));

    std::size_t total_memberships = 0;
    report.min_count = std::numeric_limits<std::size_t>::max();
    for (const auto& members : table.membership) {
        report.counts.push_back(members.size());
        total_memberships += members.size();
        report.min_count = std::min(report.min_count, members.size());
        report.max_count = std::max(report.max_count, members.size());
        std::size_t bytes = 0;
        for (SplatId id : members) bytes += mem.at(id);
        report.memory_bytes.push_back(bytes);
    }
    report.mean_count = double(total_memberships) / double(table.membership.size());
    report.overlap_fraction =
        splats.empty() ? 0.0 : double(total_memberships - splats.size()) / double(splats.size());
    return report;
}

/// Predicted transport payload per view for K subsets at WxH: each worker
/// returns C_k (3 channels) and T_k (1 channel) as row-major scalar maps.
inline std::uint64_t comm_model_bytes(int width, int height, int subset_count,
                                      std::size_t scalar_size = sizeof(float)) {
    return std::uint64_t(subset_count) * std::uint64_t(width) * std::uint64_t(height) * 4 *
           scalar_size;
}

/// One measured row of the timing table.
struct TimingRow {
    int batch = 0;
    double wall_ms = 0;
    std::vector<double> compute_ms;  // per worker
    std::vector<double> wait_fraction;
    double max_wait_fraction = 0;
    std::uint64_t comm_bytes = 0;    // forward map payload, summed over workers
};

/// Drive render barriers over a fixed view list and report per-worker compute
/// vs. blocking time. mono mode runs the monolithic renderer (zero comm).
template <typename T>
TimingRow timing_harness(Manager<T>* mgr, std::span<const Splat<T>> splats,
                         std::span<const Camera<T>> views, const Vec3<T>& background, int batch,
                         const RenderOptions& opts = {}) {
    TimingRow row;
    row.batch = batch;
    if (!mgr) {
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& cam : views) render_view<T>(splats, cam, background, opts);
        row.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        row.compute_ms = {row.wall_ms};
        row.wait_fraction = {0.0};
        row.comm_bytes = 0;
        return row;
    }

    row.compute_ms.assign(std::size_t(mgr->worker_count()), 0.0);
    for (std::size_t v = 0; v < views.size(); v += std::size_t(batch)) {
        const std::size_t n = std::min<std::size_t>(batch, views.size() - v);
        std::vector<RenderedImage<T>> images;
        const BatchTiming t = mgr->render_batch(views.subspan(v, n), background, &images);
        row.wall_ms += t.wall_ms;
        for (std::size_t k = 0; k < t.compute_ms.size(); ++k) {
            row.compute_ms[k] += t.compute_ms[k];
            row.comm_bytes += t.forward_map_bytes[k];
        }
    }
    for (double c : row.compute_ms) {
        const double frac = row.wall_ms > 0 ? std::max(0.0, (row.wall_ms - c) / row.wall_ms) : 0.0;
        row.wait_fraction.push_back(frac);
        row.max_wait_fraction = std::max(row.max_wait_fraction, frac);
    }
    return row;
}

inline void print_balance(const BalanceReport& r, std::ostream& os) {
    os << "subsets=" << r.counts.size() << " splats=" << r.total_splats << " counts[min/mean/max]="
       << r.min_count << "/" << std::fixed << std::setprecision(1) << r.mean_count << "/"
       << r.max_count << " overlap=" << std::setprecision(4) << r.overlap_fraction << "\n";
    for (std::size_t k = 0; k < r.counts.size(); ++k)
        os << "  subset " << k << ": count=" << r.counts[k] << " memory=" << r.memory_bytes[k]
           << " bytes\n";
}

inline void print_timing(const TimingRow& r, std::ostream& os) {
    os << "batch=" << r.batch << " wall_ms=" << std::fixed << std::setprecision(2) << r.wall_ms
       << " comm_bytes=" << r.comm_bytes << " max_wait_frac=" << std::setprecision(4)
       << r.max_wait_fraction << "\n";
    for (std::size_t k = 0; k < r.compute_ms.size(); ++k)
        os << "  worker " << k << ": compute_ms=" << std::setprecision(2) << r.compute_ms[k]
           << " wait_frac=" << std::setprecision(4) << r.wait_fraction[k] << "\n";
}

}  // namespace dgs
