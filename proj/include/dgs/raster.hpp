#pragma once

#include "dgs/image.hpp"
#include "dgs/parallel.hpp"
#include "dgs/splat.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

template <typename T>
struct RenderedImage {
    Image<T> color;          // H x W x 3
    Image<T> transmittance;  // H x W
    Vec3<T> background = Vec3<T>::Zero();
};

/// Per-splat gradient accumulators, index-aligned with the splat list handed
/// to the backward pass.
template <typename T>
struct GradBuffers {
    std::vector<Vec3<T>> d_mu;
    std::vector<Vec3<T>> d_log_scale;
    std::vector<Vec4<T>> d_rotation;
    std::vector<T> d_opacity_logit;
    std::vector<std::vector<Vec3<T>>> d_sh;

    GradBuffers() = default;
    explicit GradBuffers(std::span<const Splat<T>> splats) { resize(splats); }

    void resize(std::span<const Splat<T>> splats) {
        const std::size_t n = splats.size();
        d_mu.assign(n, Vec3<T>::Zero());
        d_log_scale.assign(n, Vec3<T>::Zero());
        d_rotation.assign(n, Vec4<T>::Zero());
        d_opacity_logit.assign(n, T(0));
        d_sh.resize(n);
        for (std::size_t i = 0; i < n; ++i) d_sh[i].assign(splats[i].sh.size(), Vec3<T>::Zero());
    }

    std::size_t size() const { return d_mu.size(); }

    void add(const GradBuffers& o) {
        for (std::size_t i = 0; i < size(); ++i) {
            d_mu[i] += o.d_mu[i];
            d_log_scale[i] += o.d_log_scale[i];
            d_rotation[i] += o.d_rotation[i];
            d_opacity_logit[i] += o.d_opacity_logit[i];
            for (std::size_t j = 0; j < d_sh[i].size(); ++j) d_sh[i][j] += o.d_sh[i][j];
        }
    }

    /// Index of the first splat with a non-finite gradient, or -1.
    long first_non_finite() const {
        for (std::size_t i = 0; i < size(); ++i) {
            bool ok = d_mu[i].allFinite() && d_log_scale[i].allFinite() && d_rotation[i].allFinite() &&
                      std::isfinite(d_opacity_logit[i]);
            for (const auto& v : d_sh[i]) ok = ok && v.allFinite();
            if (!ok) return static_cast<long>(i);
        }
        return -1;
    }
};

namespace detail {

/// All splats of one list projected into one view, plus a pixel-tile index for
/// candidate lookup. Tiling is a conservative prune: a splat lands in every
/// tile its truncation-radius bounding box touches, so per-pixel results are
/// bit-identical to testing every projected splat.
template <typename T>
struct ProjectedScene {
    static constexpr int kTileSize = 16;
    int width = 0, height = 0;
    int tiles_x = 0, tiles_y = 0;
    std::vector<Splat2D<T>> splats2d;
    std::vector<int> source_index;  // into the input splat list
    std::vector<std::vector<int>> bins;

    std::span<const int> candidates(int px_x, int px_y) const {
        const int tx = px_x / kTileSize, ty = px_y / kTileSize;
        return bins[static_cast<std::size_t>(ty) * tiles_x + tx];
    }
};

template <typename T>
ProjectedScene<T> project_scene(std::span<const Splat<T>> splats, const Camera<T>& cam,
                                const RenderOptions& opts) {
    ProjectedScene<T> out;
    out.width = cam.width;
    out.height = cam.height;
    out.tiles_x = (cam.width + ProjectedScene<T>::kTileSize - 1) / ProjectedScene<T>::kTileSize;
    out.tiles_y = (cam.height + ProjectedScene<T>::kTileSize - 1) / ProjectedScene<T>::kTileSize;

    std::vector<std::optional<Splat2D<T>>> slots(splats.size());
    parallel_chunks(splats.size(), kReductionChunks, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) slots[i] = project_splat(splats[i], cam, opts);
    });
    out.splats2d.reserve(splats.size());
    out.source_index.reserve(splats.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i]) {
            out.splats2d.push_back(std::move(*slots[i]));
            out.source_index.push_back(static_cast<int>(i));
        }
    }

    out.bins.assign(static_cast<std::size_t>(out.tiles_x) * out.tiles_y, {});
    const T rad = T(opts.truncation_radius);
    for (int p = 0; p < static_cast<int>(out.splats2d.size()); ++p) {
        const auto& s = out.splats2d[p];
        const T rx = rad * std::sqrt(s.cov2d(0, 0)), ry = rad * std::sqrt(s.cov2d(1, 1));
        const int x0 = std::clamp(static_cast<int>(std::floor(s.mean2d[0] - rx)) / ProjectedScene<T>::kTileSize, 0, out.tiles_x - 1);
        const int x1 = std::clamp(static_cast<int>(std::floor(s.mean2d[0] + rx)) / ProjectedScene<T>::kTileSize, 0, out.tiles_x - 1);
        const int y0 = std::clamp(static_cast<int>(std::floor(s.mean2d[1] - ry)) / ProjectedScene<T>::kTileSize, 0, out.tiles_y - 1);
        const int y1 = std::clamp(static_cast<int>(std::floor(s.mean2d[1] + ry)) / ProjectedScene<T>::kTileSize, 0, out.tiles_y - 1);
        for (int ty = y0; ty <= y1; ++ty)
            for (int tx = x0; tx <= x1; ++tx)
                out.bins[static_cast<std::size_t>(ty) * out.tiles_x + tx].push_back(p);
    }
    return out;
}

/// One kept contribution on a ray. `key` is the ordering key (per-ray t, or
/// the per-view depth in fast mode); candidates are re-sorted per pixel.
template <typename T>
struct Contribution {
    T key;
    SplatId id;
    int proj;  // index into ProjectedScene::splats2d
    T sigma;
};

/// Gather the splats that actually contribute on one ray. A contribution
/// requires, identically in the monolithic and subset renderers:
///   - 2D density above the truncation cutoff,
///   - a forward intersection point (t > 0),
///   - the intersection within the world-space support radius D_i,
///   - the caller's gate at the intersection (subset indicator; constant true
///     for the monolithic path).
template <typename T, typename GateFn>
void collect_contributions(const ProjectedScene<T>& scene, std::span<const int> candidates,
                           const Ray<T>& ray, const Vec2<T>& pix, const RenderOptions& opts,
                           GateFn&& gate, std::vector<Contribution<T>>& out) {
    out.clear();
    for (int p : candidates) {
        const Splat2D<T>& s = scene.splats2d[p];
        const T g = eval_2d(s, pix, opts);
        if (!(g > T(0))) continue;
        const T t = ray.d.dot(s.mu_world - ray.o);
        if (!(t > T(0))) continue;
        const Vec3<T> xi = ray.o + t * ray.d;
        if ((xi - s.mu_world).squaredNorm() > s.world_radius * s.world_radius) continue;
        if (!gate(xi)) continue;
        const T sigma = std::min(s.alpha * g, T(opts.sigma_clamp));
        if (!(sigma > T(0))) continue;
        out.push_back({opts.camera_z_order ? s.depth_key : t, s.source_id, p, sigma});
    }
    std::sort(out.begin(), out.end(), [](const Contribution<T>& a, const Contribution<T>& b) {
        return a.key < b.key || (a.key == b.key && a.id < b.id);
    });
}

template <typename T>
struct RayComposite {
    Vec3<T> color = Vec3<T>::Zero();
    T transmittance = T(1);
};

/// Front-to-back alpha compositing over pre-sorted contributions. Background
/// is NOT applied here; partial renders must stay background-free.
template <typename T>
RayComposite<T> composite_ray(std::span<const Contribution<T>> contribs, const ProjectedScene<T>& scene,
                              const RenderOptions& opts, std::vector<SplatId>* contributors = nullptr) {
    RayComposite<T> acc;
    const T stop = T(opts.stop_threshold);
    for (const auto& c : contribs) {
        if (stop > T(0) && acc.transmittance < stop) break;
        acc.color += scene.splats2d[c.proj].color * (c.sigma * acc.transmittance);
        acc.transmittance *= (T(1) - c.sigma);
        if (contributors) contributors->push_back(c.id);
    }
    return acc;
}

/// Reverse-mode of composite_ray for one ray; grad_color is the adjoint of
/// the background-free composite color, grad_t_eff of the final
/// transmittance (with any background term already folded in by the caller).
template <typename T>
void composite_ray_backward(std::span<const Contribution<T>> contribs, const ProjectedScene<T>& scene,
                            const RenderOptions& opts, const Vec2<T>& pix, const Vec3<T>& grad_color,
                            T grad_t_eff, std::vector<Splat2DGrad<T>>& pixel_grads,
                            std::vector<T>& prefix_scratch) {
    // Forward replay up to the termination point, recording prefix transmittances.
    const T stop = T(opts.stop_threshold);
    prefix_scratch.clear();
    T trans = T(1);
    std::size_t n_done = 0;
    for (const auto& c : contribs) {
        if (stop > T(0) && trans < stop) break;
        prefix_scratch.push_back(trans);
        trans *= (T(1) - c.sigma);
        ++n_done;
    }
    const T t_final = trans;

    Vec3<T> suffix = Vec3<T>::Zero();  // sum_{j>i} c_j sigma_j A_j
    for (std::size_t k = n_done; k-- > 0;) {
        const auto& c = contribs[k];
        const Splat2D<T>& s = scene.splats2d[c.proj];
        const T a_i = prefix_scratch[k];
        const T one_minus = T(1) - c.sigma;

        Splat2DGrad<T>& g = pixel_grads[c.proj];
        g.d_color += grad_color * (c.sigma * a_i);

        const T d_sigma = grad_color.dot(s.color) * a_i - grad_color.dot(suffix) / one_minus -
                          grad_t_eff * t_final / one_minus;
        suffix += s.color * (c.sigma * a_i);

        // sigma = min(alpha * g2d, clamp); the clamp freezes the gradient.
        const T gval = eval_2d(s, pix, opts);
        if (s.alpha * gval >= T(opts.sigma_clamp)) continue;
        g.d_alpha += d_sigma * gval;
        const T d_g = d_sigma * s.alpha;
        const Vec2<T> delta = pix - s.mean2d;
        const Vec2<T> w = s.inv_cov2d * delta;
        g.d_mean2d += (d_g * gval) * w;
        g.d_cov2d += (d_g * gval * T(0.5)) * (w * w.transpose());
    }
}

/// Shared forward pass: background-free color and transmittance maps with an
/// arbitrary intersection gate. Both the monolithic renderer and the subset
/// (partial) renderer are thin wrappers over this.
template <typename T, typename GateFn>
void render_maps(std::span<const Splat<T>> splats, const Camera<T>& cam, const RenderOptions& opts,
                 GateFn&& gate, Image<T>& color_out, Image<T>& trans_out) {
    const auto scene = project_scene(splats, cam, opts);
    color_out = Image<T>(cam.width, cam.height, 3);
    trans_out = Image<T>(cam.width, cam.height, 1, T(1));

    parallel_chunks(static_cast<std::size_t>(cam.height), kReductionChunks,
                    [&](std::size_t, std::size_t y0, std::size_t y1) {
        std::vector<Contribution<T>> contribs;
        for (std::size_t yy = y0; yy < y1; ++yy) {
            const int y = static_cast<int>(yy);
            for (int x = 0; x < cam.width; ++x) {
                const Ray<T> ray = pixel_ray(cam, x, y);
                const Vec2<T> pix{T(x) + T(0.5), T(y) + T(0.5)};
                collect_contributions(scene, scene.candidates(x, y), ray, pix, opts, gate, contribs);
                const auto acc = composite_ray<T>(contribs, scene, opts);
                color_out.set_rgb(y, x, acc.color);
                trans_out.at(y, x, 0) = acc.transmittance;
            }
        }
    });
}

/// Shared backward pass over the same gate. grad_color / grad_t_eff are the
/// adjoints of the background-free maps produced by render_maps.
template <typename T, typename GateFn>
GradBuffers<T> render_maps_backward(std::span<const Splat<T>> splats, const Camera<T>& cam,
                                    const Image<T>& grad_color, const Image<T>& grad_t_eff,
                                    const RenderOptions& opts, GateFn&& gate) {
    const auto scene = project_scene(splats, cam, opts);
    std::vector<std::vector<Splat2DGrad<T>>> chunk_grads(kReductionChunks);

    parallel_chunks(static_cast<std::size_t>(cam.height), kReductionChunks,
                    [&](std::size_t chunk, std::size_t y0, std::size_t y1) {
        auto& pg = chunk_grads[chunk];
        pg.assign(scene.splats2d.size(), Splat2DGrad<T>{});
        std::vector<Contribution<T>> contribs;
        std::vector<T> prefix;
        for (std::size_t yy = y0; yy < y1; ++yy) {
            const int y = static_cast<int>(yy);
            for (int x = 0; x < cam.width; ++x) {
                const Vec3<T> gc = grad_color.rgb(y, x);
                const T gt = grad_t_eff.at(y, x, 0);
                if (gc.isZero() && gt == T(0)) continue;
                const Ray<T> ray = pixel_ray(cam, x, y);
                const Vec2<T> pix{T(x) + T(0.5), T(y) + T(0.5)};
                collect_contributions(scene, scene.candidates(x, y), ray, pix, opts, gate, contribs);
                composite_ray_backward<T>(contribs, scene, opts, pix, gc, gt, pg, prefix);
            }
        }
    });

    // Merge pixel-space adjoints in fixed chunk order, then pull back to
    // parameters once per projected splat.
    std::vector<Splat2DGrad<T>> merged(scene.splats2d.size());
    for (const auto& pg : chunk_grads) {
        if (pg.empty()) continue;
        for (std::size_t i = 0; i < merged.size(); ++i) {
            merged[i].d_mean2d += pg[i].d_mean2d;
            merged[i].d_cov2d += pg[i].d_cov2d;
            merged[i].d_color += pg[i].d_color;
            merged[i].d_alpha += pg[i].d_alpha;
        }
    }

    GradBuffers<T> grads(splats);
    parallel_chunks(scene.splats2d.size(), kReductionChunks, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t p = b; p < e; ++p) {
            const int src = scene.source_index[p];
            SplatGradRef<T> ref{grads.d_mu[src], grads.d_log_scale[src], grads.d_rotation[src],
                                grads.d_opacity_logit[src], grads.d_sh[src]};
            project_splat_backward(splats[src], cam, merged[p], ref, opts);
        }
    });
    return grads;
}

template <typename T>
struct AcceptAll {
    bool operator()(const Vec3<T>&) const { return true; }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Monolithic renderer (the semantic reference for the distributed engine).
// ---------------------------------------------------------------------------

/// Render one view: per pixel, contributions sorted by the ray parameter of
/// the center's projection onto the ray (ties by ascending id), front-to-back
/// alpha blending, then composition over the background.
template <typename T>
RenderedImage<T> render_view(std::span<const Splat<T>> splats, const Camera<T>& cam,
                             const Vec3<T>& background, const RenderOptions& opts = {}) {
    cam.validate();
    RenderedImage<T> out;
    out.background = background;
    detail::render_maps(splats, cam, opts, detail::AcceptAll<T>{}, out.color, out.transmittance);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
            out.color.set_rgb(y, x, out.color.rgb(y, x) + out.transmittance.at(y, x, 0) * background);
    return out;
}

template <typename T>
struct RayRenderResult {
    Vec3<T> color = Vec3<T>::Zero();
    T transmittance = T(1);
};

/// Single-pixel render, bit-identical to the same pixel of render_view.
template <typename T>
RayRenderResult<T> render_ray(std::span<const Splat<T>> splats, const Camera<T>& cam, T px, T py,
                              const Vec3<T>& background, const RenderOptions& opts = {},
                              std::vector<SplatId>* contributors = nullptr) {
    const auto scene = detail::project_scene(splats, cam, opts);
    const Ray<T> ray = pixel_ray(cam, px, py);
    const Vec2<T> pix{px, py};
    std::vector<int> all(scene.splats2d.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    std::vector<detail::Contribution<T>> contribs;
    detail::collect_contributions(scene, all, ray, pix, opts, detail::AcceptAll<T>{}, contribs);
    const auto acc = detail::composite_ray<T>(contribs, scene, opts, contributors);
    return {acc.color + acc.transmittance * background, acc.transmittance};
}

/// Variant taking an explicit ray from the camera center; the sample point is
/// the ray's image under the pinhole model.
template <typename T>
RayRenderResult<T> render_ray(std::span<const Splat<T>> splats, const Camera<T>& cam, const Ray<T>& ray,
                              const Vec3<T>& background, const RenderOptions& opts = {},
                              std::vector<SplatId>* contributors = nullptr) {
    const Vec3<T> d_cam = cam.rotation() * ray.d;
    if (!(d_cam[2] > T(0))) return {background, T(1)};
    const T px = cam.fx * d_cam[0] / d_cam[2] + cam.cx;
    const T py = cam.fy * d_cam[1] / d_cam[2] + cam.cy;
    return render_ray(splats, cam, px, py, background, opts, contributors);
}

/// Analytic adjoint of render_view. grad_color is the loss gradient w.r.t.
/// the output color (background included), grad_t w.r.t. the transmittance
/// map. The forward options must be replayed unchanged.
template <typename T>
GradBuffers<T> render_backward(std::span<const Splat<T>> splats, const Camera<T>& cam,
                               const Image<T>& grad_color, const Image<T>& grad_t,
                               const Vec3<T>& background, const RenderOptions& opts = {}) {
    if (grad_color.width != cam.width || grad_color.height != cam.height || grad_color.channels != 3)
        throw std::invalid_argument("render_backward: grad_color shape mismatch");
    if (grad_t.width != cam.width || grad_t.height != cam.height || grad_t.channels != 1)
        throw std::invalid_argument("render_backward: grad_t shape mismatch");

    // Fold the background term: out = C + T * bg, so dL/dT |= gc . bg.
    Image<T> grad_t_eff = grad_t;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
            grad_t_eff.at(y, x, 0) += grad_color.rgb(y, x).dot(background);

    auto grads = detail::render_maps_backward(splats, cam, grad_color, grad_t_eff, opts,
                                              detail::AcceptAll<T>{});
    const long bad = grads.first_non_finite();
    if (bad >= 0)
        throw std::runtime_error("render_backward: non-finite gradient for splat id " +
                                 std::to_string(splats[static_cast<std::size_t>(bad)].id));
    return grads;
}

}  // namespace dgs
