#pragma once

#include "dgs/raster.hpp"
#include "dgs/splat.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dgs {

/// Training hyperparameters. Per-group learning rates follow the reference
/// splatting trainer; the position rate decays exponentially between the
/// configured endpoints over the full run.
struct TrainConfig {
    std::uint64_t iterations = 2000;
    int batch_size = 1;          // views dispatched before a barrier
    double lambda_ssim = 0.2;
    double lr_position_start = 1.6e-4;
    double lr_position_end = 1.6e-6;
    double lr_sh_dc = 2.5e-3;
    double lr_sh_rest = 2.5e-3 / 20.0;
    double lr_opacity = 0.025;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-15;
    int kd_depth = 0;            // K = 2^depth workers
    std::uint64_t repartition_interval = 0;  // epochs; 0 disables
    bool grad_sync = false;
    bool deterministic = true;   // fixed-order reductions
    std::uint64_t seed = 0;

    void validate() const {
        if (lambda_ssim < 0.0 || lambda_ssim > 1.0)
            throw std::invalid_argument("config: lambda_ssim must be in [0,1]");
        if (lr_position_end > lr_position_start)
            throw std::invalid_argument("config: position LR end must not exceed start");
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    }
};

/// lr(t) = start * (end/start)^(t/T); hits the endpoints exactly.
inline double position_lr(const TrainConfig& cfg, std::uint64_t step) {
    if (cfg.iterations == 0 || cfg.lr_position_start <= 0.0) return cfg.lr_position_start;
    if (step == 0) return cfg.lr_position_start;
    if (step >= cfg.iterations) return cfg.lr_position_end;
    const double frac = double(step) / double(cfg.iterations);
    return cfg.lr_position_start *
           std::pow(cfg.lr_position_end / cfg.lr_position_start, frac);
}

/// Flat per-splat parameter block mirroring Splat's trainable fields; used for
/// the optimizer's first/second moments.
template <typename T>
struct ParamBlock {
    Vec3<T> mu = Vec3<T>::Zero();
    Vec3<T> log_scale = Vec3<T>::Zero();
    Vec4<T> rotation = Vec4<T>::Zero();
    T opacity = T(0);
    std::vector<Vec3<T>> sh;

    static ParamBlock like(const Splat<T>& s) {
        ParamBlock b;
        b.sh.assign(s.sh.size(), Vec3<T>::Zero());
        return b;
    }
};

template <typename T>
struct AdamMoments {
    ParamBlock<T> m, v;

    static AdamMoments like(const Splat<T>& s) { return {ParamBlock<T>::like(s), ParamBlock<T>::like(s)}; }

    bool finite() const {
        bool ok = m.mu.allFinite() && v.mu.allFinite() && m.log_scale.allFinite() && v.log_scale.allFinite() &&
                  m.rotation.allFinite() && v.rotation.allFinite() && std::isfinite(m.opacity) &&
                  std::isfinite(v.opacity);
        for (const auto& x : m.sh) ok = ok && x.allFinite();
        for (const auto& x : v.sh) ok = ok && x.allFinite();
        return ok;
    }
};

namespace detail {

template <typename T>
inline void adam_scalar(T& theta, T& m, T& v, T g, T lr, T b1, T b2, T eps, T bc1, T bc2) {
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g * g;
    const T mhat = m / bc1;
    const T vhat = v / bc2;
    theta -= lr * mhat / (std::sqrt(vhat) + eps);
}

}  // namespace detail

/// One adaptive-moment update for one splat. `step` is the 1-based update
/// count (used for bias correction); the position learning rate is supplied by
/// the caller's schedule.
template <typename T>
void adam_apply(Splat<T>& s, const GradBuffers<T>& grads, std::size_t i, AdamMoments<T>& mom,
                const TrainConfig& cfg, double lr_pos, std::uint64_t step) {
    const T b1 = T(cfg.adam_beta1), b2 = T(cfg.adam_beta2), eps = T(cfg.adam_eps);
    const T bc1 = T(1) - std::pow(b1, T(step));
    const T bc2 = T(1) - std::pow(b2, T(step));
    for (int a = 0; a < 3; ++a) {
        detail::adam_scalar(s.mu[a], mom.m.mu[a], mom.v.mu[a], grads.d_mu[i][a], T(lr_pos), b1, b2, eps, bc1, bc2);
        detail::adam_scalar(s.log_scale[a], mom.m.log_scale[a], mom.v.log_scale[a], grads.d_log_scale[i][a],
                            T(cfg.lr_scale), b1, b2, eps, bc1, bc2);
    }
    for (int a = 0; a < 4; ++a)
        detail::adam_scalar(s.rotation[a], mom.m.rotation[a], mom.v.rotation[a], grads.d_rotation[i][a],
                            T(cfg.lr_rotation), b1, b2, eps, bc1, bc2);
    detail::adam_scalar(s.opacity_logit, mom.m.opacity, mom.v.opacity, grads.d_opacity_logit[i],
                        T(cfg.lr_opacity), b1, b2, eps, bc1, bc2);
    for (std::size_t j = 0; j < s.sh.size(); ++j) {
        const T lr = j == 0 ? T(cfg.lr_sh_dc) : T(cfg.lr_sh_rest);
        for (int a = 0; a < 3; ++a)
            detail::adam_scalar(s.sh[j][a], mom.m.sh[j][a], mom.v.sh[j][a], grads.d_sh[i][j][a], lr, b1, b2,
                                eps, bc1, bc2);
    }
}

}  // namespace dgs
