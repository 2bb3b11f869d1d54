#pragma once

#include "dgs/partition.hpp"
#include "dgs/raster.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

/// Per-subset partial render: background-free color map C_k and transmittance
/// map T_k, the only payload that ever crosses workers.
template <typename T>
struct PartialImage {
    int k = 0;
    std::uint64_t view_id = 0;
    Image<T> color;          // C_k, H x W x 3
    Image<T> transmittance;  // T_k, H x W
};

namespace detail {

/// Gate that admits a contribution only when its ray intersection point lies
/// inside the subset's subspace — the computable form of the membership
/// indicator. The enabled flag is the boundary-test negative-control hook.
template <typename T>
struct SubspaceGate {
    const Subspace<T>* sub;
    bool enabled;
    bool operator()(const Vec3<T>& xi) const { return !enabled || indicator(xi, *sub) == 1; }
};

}  // namespace detail

/// Render the subset's contribution for one view: per pixel, members sorted by
/// per-ray depth, composited with indicator gating, no background, yielding
/// (C_k, T_k). Pixels whose rays never enter the subspace stay at (0, 1)
/// exactly.
template <typename T>
PartialImage<T> partial_render(std::span<const Splat<T>> members, const Subspace<T>& sub,
                               const Camera<T>& cam, const RenderOptions& opts = {}) {
    PartialImage<T> out;
    out.k = sub.k;
    detail::render_maps(members, cam, opts, detail::SubspaceGate<T>{&sub, opts.indicator_enabled},
                        out.color, out.transmittance);
    return out;
}

/// Single-pixel partial render; used by property tests and the contribution
/// instrumentation. Returns the background-free (C_k, T_k) of that pixel.
template <typename T>
detail::RayComposite<T> partial_render_ray(std::span<const Splat<T>> members, const Subspace<T>& sub,
                                           const Camera<T>& cam, T px, T py,
                                           const RenderOptions& opts = {},
                                           std::vector<SplatId>* contributors = nullptr) {
    const auto scene = detail::project_scene(members, cam, opts);
    const Ray<T> ray = pixel_ray(cam, px, py);
    const Vec2<T> pix{px, py};
    std::vector<int> all(scene.splats2d.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    std::vector<detail::Contribution<T>> contribs;
    detail::collect_contributions(scene, all, ray, pix, opts,
                                  detail::SubspaceGate<T>{&sub, opts.indicator_enabled}, contribs);
    return detail::composite_ray<T>(contribs, scene, opts, contributors);
}

/// Adjoint of partial_render: given the loss gradients w.r.t. C_k and T_k,
/// produce parameter gradients for the member splats (index-aligned).
template <typename T>
GradBuffers<T> partial_render_backward(std::span<const Splat<T>> members, const Subspace<T>& sub,
                                       const Camera<T>& cam, const Image<T>& grad_color,
                                       const Image<T>& grad_trans, const RenderOptions& opts = {}) {
    if (grad_color.width != cam.width || grad_color.height != cam.height || grad_color.channels != 3 ||
        grad_trans.width != cam.width || grad_trans.height != cam.height || grad_trans.channels != 1)
        throw std::invalid_argument("partial_render_backward: gradient shape mismatch");
    auto grads = detail::render_maps_backward(members, cam, grad_color, grad_trans, opts,
                                              detail::SubspaceGate<T>{&sub, opts.indicator_enabled});
    const long bad = grads.first_non_finite();
    if (bad >= 0)
        throw std::runtime_error("partial_render_backward: non-finite gradient for splat id " +
                                 std::to_string(members[static_cast<std::size_t>(bad)].id));
    return grads;
}

// ---------------------------------------------------------------------------
// Per-pixel merge orders.
// ---------------------------------------------------------------------------

/// The per-pixel permutation o_l: for each pixel, the indices of the subspaces
/// its ray passes through, in traversal order. Rows are flattened with stride
/// subset_count; count[pixel] gives the live prefix length.
struct PixelOrders {
    int width = 0, height = 0, subset_count = 0;
    std::vector<std::uint16_t> order;
    std::vector<std::uint16_t> count;

    std::span<const std::uint16_t> at(int y, int x) const {
        const std::size_t p = static_cast<std::size_t>(y) * width + x;
        return {order.data() + p * subset_count, count[p]};
    }
};

template <typename T>
PixelOrders compute_pixel_orders(const PartitionTable<T>& table, const Camera<T>& cam) {
    PixelOrders po;
    po.width = cam.width;
    po.height = cam.height;
    po.subset_count = table.subset_count();
    po.order.assign(static_cast<std::size_t>(cam.width) * cam.height * po.subset_count, 0);
    po.count.assign(static_cast<std::size_t>(cam.width) * cam.height, 0);
    parallel_chunks(static_cast<std::size_t>(cam.height), kReductionChunks,
                    [&](std::size_t, std::size_t y0, std::size_t y1) {
        std::vector<TraversalEntry<T>> entries;
        for (std::size_t yy = y0; yy < y1; ++yy) {
            const int y = static_cast<int>(yy);
            for (int x = 0; x < cam.width; ++x) {
                subspace_order(pixel_ray(cam, x, y), table, entries);
                const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
                po.count[p] = static_cast<std::uint16_t>(entries.size());
                for (std::size_t i = 0; i < entries.size(); ++i)
                    po.order[p * po.subset_count + i] = static_cast<std::uint16_t>(entries[i].k);
            }
        }
    });
    return po;
}

// ---------------------------------------------------------------------------
// Merge (Eq.-5 form) and its adjoint.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
const PartialImage<T>* find_partial(std::span<const PartialImage<T>> partials, int k) {
    for (const auto& p : partials)
        if (p.k == k) return &p;
    return nullptr;
}

}  // namespace detail

/// Merge per-subset partials into the final image: per pixel,
/// C = sum_k C_k * prod_{m before k} T_m over the ray's traversal order,
/// T = prod_k T_k, color = C + T * background. Subsets absent from a pixel's
/// order hold (0,1) there, so skipping them is exact.
template <typename T>
RenderedImage<T> merge(std::span<const PartialImage<T>> partials, const PixelOrders& orders,
                       const Vec3<T>& background) {
    std::vector<const PartialImage<T>*> by_k(orders.subset_count, nullptr);
    std::string missing;
    for (int k = 0; k < orders.subset_count; ++k) {
        by_k[k] = detail::find_partial(partials, k);
        if (!by_k[k]) missing += (missing.empty() ? "" : " ") + std::to_string(k);
        else if (by_k[k]->color.width != orders.width || by_k[k]->color.height != orders.height)
            throw std::invalid_argument("merge: partial shape mismatch for subset " + std::to_string(k));
    }
    if (!missing.empty()) throw std::invalid_argument("merge: missing subset partials: " + missing);

    RenderedImage<T> out;
    out.background = background;
    out.color = Image<T>(orders.width, orders.height, 3);
    out.transmittance = Image<T>(orders.width, orders.height, 1, T(1));
    for (int y = 0; y < orders.height; ++y) {
        for (int x = 0; x < orders.width; ++x) {
            Vec3<T> c = Vec3<T>::Zero();
            T trans = T(1);
            for (std::uint16_t k : orders.at(y, x)) {
                c += trans * by_k[k]->color.rgb(y, x);
                trans *= by_k[k]->transmittance.at(y, x, 0);
            }
            out.color.set_rgb(y, x, c + trans * background);
            out.transmittance.at(y, x, 0) = trans;
        }
    }
    return out;
}

/// Loss gradients flowing back into one subset's partial maps.
template <typename T>
struct PartialGrad {
    int k = 0;
    Image<T> d_color;          // dL/dC_k
    Image<T> d_transmittance;  // dL/dT_k
};

/// Adjoint of merge: dC/dC_k is the prefix product of earlier T_m, dC/dT_m
/// collects every later subset's color term plus the background/total-T chain.
/// Order-aware per pixel; subsets missing from a pixel's order get zero.
template <typename T>
std::vector<PartialGrad<T>> merge_backward(std::span<const PartialImage<T>> partials,
                                           const PixelOrders& orders, const Image<T>& grad_color,
                                           const Image<T>& grad_trans_total, const Vec3<T>& background) {
    std::vector<const PartialImage<T>*> by_k(orders.subset_count, nullptr);
    for (int k = 0; k < orders.subset_count; ++k) {
        by_k[k] = detail::find_partial(partials, k);
        if (!by_k[k]) throw std::invalid_argument("merge_backward: missing subset partial " + std::to_string(k));
    }
    std::vector<PartialGrad<T>> out(orders.subset_count);
    for (int k = 0; k < orders.subset_count; ++k) {
        out[k].k = k;
        out[k].d_color = Image<T>(orders.width, orders.height, 3);
        out[k].d_transmittance = Image<T>(orders.width, orders.height, 1);
    }

    std::vector<T> prefix(static_cast<std::size_t>(orders.subset_count) + 1);
    for (int y = 0; y < orders.height; ++y) {
        for (int x = 0; x < orders.width; ++x) {
            const auto ord = orders.at(y, x);
            const Vec3<T> gc = grad_color.rgb(y, x);
            const T gt_eff = grad_trans_total.at(y, x, 0) + gc.dot(background);
            prefix[0] = T(1);
            for (std::size_t i = 0; i < ord.size(); ++i)
                prefix[i + 1] = prefix[i] * by_k[ord[i]]->transmittance.at(y, x, 0);
            // Reverse sweep: suffix holds sum_{k>m} C_k prod_{m<j<k} T_j, and
            // tail_prod holds prod_{j>m} T_j.
            Vec3<T> suffix = Vec3<T>::Zero();
            T tail_prod = T(1);
            for (std::size_t i = ord.size(); i-- > 0;) {
                const int k = ord[i];
                out[k].d_color.set_rgb(y, x, prefix[i] * gc);
                out[k].d_transmittance.at(y, x, 0) = prefix[i] * (gc.dot(suffix) + gt_eff * tail_prod);
                suffix = by_k[k]->color.rgb(y, x) + by_k[k]->transmittance.at(y, x, 0) * suffix;
                tail_prod *= by_k[k]->transmittance.at(y, x, 0);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Boundary validity (the Fig.-6-style split-camera check).
// ---------------------------------------------------------------------------

template <typename T>
struct BoundaryReport {
    bool passed = false;
    std::size_t checked_pixels = 0;
    std::vector<std::array<int, 3>> offenders;  // (k, x, y), capped
    std::vector<PartialImage<T>> partials;
    RenderedImage<T> merged;
};

/// With the camera's optical axis lying in the dividing plane of a two-subset
/// partition, every ray passes through exactly one subspace, so each partial
/// must hold C_k = 0, T_k = 1 (bitwise) on the half whose rays never enter
/// S_k. Exact, not tolerance-based.
template <typename T>
BoundaryReport<T> boundary_validity_test(std::span<const Splat<T>> splats,
                                         const PartitionTable<T>& table, const Camera<T>& cam,
                                         const RenderOptions& opts = {}) {
    if (table.subset_count() != 2)
        throw std::invalid_argument("boundary_validity_test: needs a two-subspace partition");

    BoundaryReport<T> report;
    std::vector<std::vector<Splat<T>>> members(2);
    for (int k = 0; k < 2; ++k) {
        for (SplatId id : table.membership[k])
            for (const auto& s : splats)
                if (s.id == id) {
                    members[k].push_back(s);
                    break;
                }
        report.partials.push_back(partial_render<T>(members[k], table.subspaces[k], cam, opts));
    }

    const PixelOrders orders = compute_pixel_orders(table, cam);
    report.merged = merge<T>(report.partials, orders, Vec3<T>::Zero());

    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const auto ord = orders.at(y, x);
            for (int k = 0; k < 2; ++k) {
                const bool entered = std::find(ord.begin(), ord.end(), std::uint16_t(k)) != ord.end();
                if (entered) continue;
                ++report.checked_pixels;
                const Vec3<T> c = report.partials[k].color.rgb(y, x);
                const T t = report.partials[k].transmittance.at(y, x, 0);
                if (c[0] != T(0) || c[1] != T(0) || c[2] != T(0) || t != T(1)) {
                    if (report.offenders.size() < 64) report.offenders.push_back({k, x, y});
                    else return report;  // already failed; cap the scan
                }
            }
        }
    }
    report.passed = report.offenders.empty() && report.checked_pixels > 0;
    return report;
}

}  // namespace dgs
