#pragma once

#include "dgs/loss.hpp"
#include "dgs/manager.hpp"
#include "dgs/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

/// Fixed-count initialization from a point cloud: uniform subsample (with
/// replacement + jitter when oversampling), isotropic scales from the mean
/// distance to the 3 nearest sampled neighbors, identity rotation, opacity
/// 0.1, DC color from the point color.
template <typename T>
std::vector<Splat<T>> init_from_pointcloud(std::span<const Vec3<T>> points,
                                           std::span<const Vec3<T>> colors, std::size_t target_count,
                                           std::uint64_t seed, int sh_degree = 3) {
    if (points.empty()) throw std::invalid_argument("init_from_pointcloud: empty cloud");
    if (!colors.empty() && colors.size() != points.size())
        throw std::invalid_argument("init_from_pointcloud: color count mismatch");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picks;
    picks.reserve(target_count);
    Vec3<T> jitter_sigma = Vec3<T>::Zero();
    if (target_count <= points.size()) {
        std::vector<std::size_t> all(points.size());
        std::iota(all.begin(), all.end(), 0);
        std::sample(all.begin(), all.end(), std::back_inserter(picks), target_count, rng);
    } else {
        Vec3<T> lo = points[0], hi = points[0];
        for (const auto& p : points) {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        jitter_sigma = Vec3<T>::Constant(T(1e-3) * (hi - lo).norm());
        std::uniform_int_distribution<std::size_t> pick(0, points.size() - 1);
        for (std::size_t i = 0; i < target_count; ++i) picks.push_back(pick(rng));
    }

    std::normal_distribution<double> gauss;
    std::vector<Vec3<T>> centers(picks.size());
    for (std::size_t i = 0; i < picks.size(); ++i) {
        centers[i] = points[picks[i]];
        if (jitter_sigma[0] > T(0))
            centers[i] += Vec3<T>{T(gauss(rng)) * jitter_sigma[0], T(gauss(rng)) * jitter_sigma[1],
                                  T(gauss(rng)) * jitter_sigma[2]};
    }

    // Mean distance to the 3 nearest sampled neighbors, brute force.
    const std::size_t n = centers.size();
    std::vector<T> nn_mean(n, T(1));
    const std::size_t k_nn = std::min<std::size_t>(3, n - 1);
    if (k_nn > 0) {
        parallel_chunks(n, kReductionChunks, [&](std::size_t, std::size_t b, std::size_t e) {
            std::vector<T> d2(n);
            for (std::size_t i = b; i < e; ++i) {
                for (std::size_t j = 0; j < n; ++j) d2[j] = (centers[j] - centers[i]).squaredNorm();
                d2[i] = std::numeric_limits<T>::infinity();
                std::nth_element(d2.begin(), d2.begin() + (k_nn - 1), d2.end());
                T acc = T(0);
                for (std::size_t j = 0; j < k_nn; ++j) acc += std::sqrt(d2[j]);
                nn_mean[i] = acc / T(k_nn);
            }
        });
    }

    const int n_coeff = (sh_degree + 1) * (sh_degree + 1);
    std::vector<Splat<T>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& s = out[i];
        s.id = static_cast<SplatId>(i);
        s.mu = centers[i];
        s.log_scale = Vec3<T>::Constant(std::log(std::max(nn_mean[i], T(1e-7))));
        s.rotation = {T(1), T(0), T(0), T(0)};
        s.opacity_logit = logit(T(0.1));
        s.sh.assign(n_coeff, Vec3<T>::Zero());
        const Vec3<T> color = colors.empty() ? Vec3<T>::Constant(T(0.5)) : colors[picks[i]];
        s.sh[0] = (color - Vec3<T>::Constant(T(0.5))) / T(sh::kC0);
    }
    return out;
}

/// One metric-log record ({step, loss, psnr, lr_position, comm_bytes, wall_ms}).
struct TrainRecord {
    std::uint64_t step = 0;
    double loss = 0;
    double psnr = 0;
    double lr_position = 0;
    std::uint64_t comm_bytes = 0;
    double wall_ms = 0;
};

template <typename T>
struct TrainResult {
    std::vector<SplatPack<T>> checkpoint;
    std::vector<TrainRecord> log;
    double final_loss = 0;
};

/// Mean held-out PSNR over a view set, rendered through the manager.
template <typename T>
double eval_psnr(Manager<T>& mgr, std::span<const Camera<T>> cams, std::span<const Image<T>> targets,
                 const Vec3<T>& background) {
    double acc = 0;
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto img = mgr.render(cams[v], background);
        acc += psnr(img.color, targets[v]);
    }
    return acc / double(cams.size());
}

/// End-to-end optimization: barrier-synchronized steps over the manager,
/// seeded per-epoch view shuffling, periodic re-partitioning, fixed primitive
/// count throughout.
template <typename T>
TrainResult<T> train(std::vector<Splat<T>> init, std::span<const Camera<T>> cams,
                     std::span<const Image<T>> targets, const Vec3<T>& background, TrainConfig cfg,
                     RenderOptions opts = {}, bool process_workers = false,
                     const std::function<void(const TrainRecord&)>& sink = nullptr,
                     std::uint64_t log_interval = 10) {
    cfg.validate();
    if (cams.size() != targets.size() || cams.empty())
        throw std::invalid_argument("train: need one target per camera");
    const std::size_t start_count = init.size();
    const std::size_t steps_per_epoch =
        (cams.size() + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size);

    Manager<T> mgr(std::move(init), cfg, opts, process_workers);
    TrainResult<T> result;

    std::vector<std::size_t> order(cams.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Camera<T>> batch_cams(cfg.batch_size);
    std::vector<Image<T>> batch_targets(cfg.batch_size);

    std::uint64_t epoch_index = 0;
    std::size_t cursor = 0;
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::uint64_t step = 0; step < cfg.iterations; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t v = order[cursor];
            batch_cams[b] = cams[v];
            batch_targets[b] = targets[v];
            cursor = (cursor + 1) % order.size();
            if (cursor == 0) std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        const auto r = mgr.train_step(batch_cams, batch_targets, background);
        if (!std::isfinite(r.loss)) throw std::runtime_error("NaN loss at step " + std::to_string(step));
        result.final_loss = r.loss;
        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

        if (sink || !result.log.empty() || log_interval > 0) {
            if (step % std::max<std::uint64_t>(log_interval, 1) == 0 || step + 1 == cfg.iterations) {
                TrainRecord rec{step, r.loss, r.psnr, position_lr(cfg, step), r.comm_bytes, wall};
                result.log.push_back(rec);
                if (sink) sink(rec);
            }
        }

        // Epoch boundary: periodic re-partition on current centers.
        const bool epoch_done = (step + 1) % steps_per_epoch == 0;
        if (epoch_done) {
            ++epoch_index;
            if (cfg.repartition_interval > 0 && epoch_index % cfg.repartition_interval == 0 &&
                step + 1 < cfg.iterations)
                mgr.repartition();
        }
    }

    result.checkpoint = mgr.snapshot();
    if (result.checkpoint.size() != start_count)
        throw std::runtime_error("train: primitive count changed during the run");
    mgr.shutdown();
    return result;
}

}  // namespace dgs
