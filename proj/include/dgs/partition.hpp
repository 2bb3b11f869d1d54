#pragma once

#include "dgs/splat.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

/// Half-space constraint n.x + d <= 0 (closed) or < 0 (open). The half-open
/// senses make boundary points belong to exactly one subspace.
template <typename T>
struct HalfSpace {
    Vec3<T> n = Vec3<T>::UnitX();
    T d = T(0);
    bool closed = true;

    bool contains(const Vec3<T>& x) const {
        const T v = n.dot(x) + d;
        return closed ? v <= T(0) : v < T(0);
    }
    /// Signed plane value; membership slack tests compare this against D_i.
    T value(const Vec3<T>& x) const { return n.dot(x) + d; }
};

/// Convex subspace as a plane list. Absent aabb faces are unbounded (the
/// outermost KD leaves and grid border cells extend to infinity).
template <typename T>
struct Subspace {
    int k = 0;
    std::vector<HalfSpace<T>> planes;
    Vec3<T> aabb_min = Vec3<T>::Constant(-std::numeric_limits<T>::infinity());
    Vec3<T> aabb_max = Vec3<T>::Constant(std::numeric_limits<T>::infinity());
};

enum class PartitionKind { kKdTree, kFixedGrid };

template <typename T>
struct PartitionTable {
    std::vector<Subspace<T>> subspaces;
    std::vector<std::vector<SplatId>> membership;  // N_k as splat ids, input order
    int depth = 0;   // L for KD trees; -1 for grids
    PartitionKind kind = PartitionKind::kKdTree;
    std::uint64_t epoch = 0;

    int subset_count() const { return static_cast<int>(subspaces.size()); }
};

/// 1 iff x satisfies every plane of the subspace. Exactly one subspace of a
/// table returns 1 for any point.
template <typename T>
inline int indicator(const Vec3<T>& x, const Subspace<T>& s) {
    for (const auto& p : s.planes)
        if (!p.contains(x)) return 0;
    return 1;
}

/// Index of the unique subspace containing x.
template <typename T>
inline int locate(const PartitionTable<T>& table, const Vec3<T>& x) {
    for (const auto& s : table.subspaces)
        if (indicator(x, s)) return s.k;
    throw std::logic_error("partition does not tile space");  // unreachable for a valid table
}

/// Orthogonal projection of the splat center onto the ray line:
/// x_i = o + (d.(u - o)) d.
template <typename T>
inline Vec3<T> intersection_point(const Ray<T>& ray, const Vec3<T>& center) {
    return ray.o + ray.d.dot(center - ray.o) * ray.d;
}

template <typename T>
inline Vec3<T> intersection_point(const Ray<T>& ray, const Splat<T>& s) {
    return intersection_point(ray, s.mu);
}

namespace detail {

template <typename T>
struct KdBuildCtx {
    std::vector<Vec3<T>> pts;
    std::vector<Subspace<T>> leaves;
};

template <typename T>
void kd_split(KdBuildCtx<T>& ctx, std::size_t begin, std::size_t end, int depth, int target_depth,
              Subspace<T> region) {
    if (depth == target_depth) {
        region.k = static_cast<int>(ctx.leaves.size());
        ctx.leaves.push_back(std::move(region));
        return;
    }

    // Widest extent of the centers in this node picks the axis; empty or
    // point-degenerate nodes fall back to the region box.
    int axis = 0;
    T plane_coord = T(0);
    if (begin < end) {
        Vec3<T> lo = ctx.pts[begin], hi = ctx.pts[begin];
        for (std::size_t i = begin + 1; i < end; ++i) {
            lo = lo.cwiseMin(ctx.pts[i]);
            hi = hi.cwiseMax(ctx.pts[i]);
        }
        const Vec3<T> extent = hi - lo;
        extent.maxCoeff(&axis);

        std::vector<T> coords(end - begin);
        for (std::size_t i = begin; i < end; ++i) coords[i - begin] = ctx.pts[i][axis];
        std::sort(coords.begin(), coords.end());
        const std::size_t n = coords.size();
        // Lower median; midpoint of the two middle values when the count is even.
        plane_coord = (n % 2 == 0) ? (coords[n / 2 - 1] + coords[n / 2]) / T(2) : coords[n / 2];
    } else {
        const T lo = region.aabb_min[axis], hi = region.aabb_max[axis];
        plane_coord = (std::isfinite(lo) && std::isfinite(hi)) ? (lo + hi) / T(2)
                      : std::isfinite(lo)                      ? lo + T(1)
                      : std::isfinite(hi)                      ? hi - T(1)
                                                               : T(0);
    }

    // Partition the segment geometrically: < plane left, >= plane right.
    std::size_t mid = begin;
    for (std::size_t i = begin; i < end; ++i)
        if (ctx.pts[i][axis] < plane_coord) std::swap(ctx.pts[i], ctx.pts[mid++]);

    Subspace<T> left = region, right = std::move(region);
    HalfSpace<T> lp;  // x_axis < plane
    lp.n = Vec3<T>::Zero();
    lp.n[axis] = T(1);
    lp.d = -plane_coord;
    lp.closed = false;
    left.planes.push_back(lp);
    left.aabb_max[axis] = std::min(left.aabb_max[axis], plane_coord);

    HalfSpace<T> rp;  // x_axis >= plane
    rp.n = Vec3<T>::Zero();
    rp.n[axis] = T(-1);
    rp.d = plane_coord;
    rp.closed = true;
    right.planes.push_back(rp);
    right.aabb_min[axis] = std::max(right.aabb_min[axis], plane_coord);

    kd_split(ctx, begin, mid, depth + 1, target_depth, std::move(left));
    kd_split(ctx, mid, end, depth + 1, target_depth, std::move(right));
}

}  // namespace detail

/// Build a KD partition of depth L over the given centers: 2^L leaves, median
/// splits along the widest axis, half-open plane senses, outer faces open to
/// infinity so the leaves tile all of space.
template <typename T>
PartitionTable<T> build_kdtree(std::span<const Vec3<T>> centers, int depth) {
    if (centers.empty()) throw std::invalid_argument("build_kdtree: empty point set");
    if (depth < 0) throw std::invalid_argument("build_kdtree: negative depth");
    if (depth > 0) {
        Vec3<T> lo = centers[0], hi = centers[0];
        for (const auto& c : centers) {
            lo = lo.cwiseMin(c);
            hi = hi.cwiseMax(c);
        }
        if ((hi - lo).maxCoeff() <= T(0)) throw std::invalid_argument("degenerate point set");
    }

    detail::KdBuildCtx<T> ctx;
    ctx.pts.assign(centers.begin(), centers.end());
    ctx.leaves.reserve(std::size_t(1) << depth);
    detail::kd_split(ctx, 0, ctx.pts.size(), 0, depth, Subspace<T>{});

    PartitionTable<T> table;
    table.subspaces = std::move(ctx.leaves);
    table.membership.resize(table.subspaces.size());
    table.depth = depth;
    table.kind = PartitionKind::kKdTree;
    return table;
}

/// Regular grid over the bounds; border cells are extended to infinity so the
/// cells tile all of space.
template <typename T>
PartitionTable<T> build_fixed_grid(const Vec3<T>& lo, const Vec3<T>& hi, const Vec3<T>& cell_size) {
    if (!(cell_size.minCoeff() > T(0))) throw std::invalid_argument("build_fixed_grid: cell_size must be positive");
    int n[3];
    for (int a = 0; a < 3; ++a)
        n[a] = std::max(1, static_cast<int>(std::ceil(double(hi[a] - lo[a]) / double(cell_size[a]) - 1e-9)));

    PartitionTable<T> table;
    table.kind = PartitionKind::kFixedGrid;
    table.depth = -1;
    for (int iz = 0; iz < n[2]; ++iz)
        for (int iy = 0; iy < n[1]; ++iy)
            for (int ix = 0; ix < n[0]; ++ix) {
                Subspace<T> s;
                s.k = static_cast<int>(table.subspaces.size());
                const int idx[3] = {ix, iy, iz};
                for (int a = 0; a < 3; ++a) {
                    if (idx[a] > 0) {  // x_a >= lo + i*c
                        HalfSpace<T> p;
                        p.n = Vec3<T>::Zero();
                        p.n[a] = T(-1);
                        p.d = lo[a] + T(idx[a]) * cell_size[a];
                        p.closed = true;
                        s.planes.push_back(p);
                        s.aabb_min[a] = lo[a] + T(idx[a]) * cell_size[a];
                    }
                    if (idx[a] < n[a] - 1) {  // x_a < lo + (i+1)*c
                        HalfSpace<T> p;
                        p.n = Vec3<T>::Zero();
                        p.n[a] = T(1);
                        p.d = -(lo[a] + T(idx[a] + 1) * cell_size[a]);
                        p.closed = false;
                        s.planes.push_back(p);
                        s.aabb_max[a] = lo[a] + T(idx[a] + 1) * cell_size[a];
                    }
                }
                table.subspaces.push_back(std::move(s));
            }
    table.membership.resize(table.subspaces.size());
    return table;
}

/// Fill N_k: splat i joins subset k iff every plane value at its center is
/// <= D_i, with D_i = truncation multiplier x largest semi-axis. Subsets
/// overlap near boundaries; the subspace containing the center always keeps
/// its splat.
template <typename T>
void assign_subsets(PartitionTable<T>& table, std::span<const Splat<T>> splats,
                    double d_multiplier = 3.0) {
    for (auto& m : table.membership) m.clear();
    for (const auto& s : splats) {
        const T di = T(d_multiplier) * s.max_scale();
        for (const auto& sub : table.subspaces) {
            bool member = true;
            for (const auto& p : sub.planes) {
                if (p.value(s.mu) > di) {
                    member = false;
                    break;
                }
            }
            if (member) table.membership[sub.k].push_back(s.id);
        }
    }
}

/// One entry of a ray's traversal order: the subspace and its clipped
/// parameter interval.
template <typename T>
struct TraversalEntry {
    int k;
    T t_enter;  // max(t_in, 0)
    T t_exit;
};

/// Clip the ray against every subspace and order the hit ones by entry
/// parameter (ties by k); the subspace containing the origin comes first.
/// Subspaces entirely behind the origin (t_out <= 0) are dropped.
template <typename T>
void subspace_order(const Ray<T>& ray, const PartitionTable<T>& table,
                    std::vector<TraversalEntry<T>>& out) {
    out.clear();
    constexpr T inf = std::numeric_limits<T>::infinity();
    for (const auto& s : table.subspaces) {
        T t_lo = -inf, t_hi = inf;
        bool empty = false;
        for (const auto& p : s.planes) {
            const T a = p.n.dot(ray.d);
            const T b = p.n.dot(ray.o) + p.d;
            if (a == T(0)) {
                if (b > T(0)) {
                    empty = true;
                    break;
                }
            } else {
                const T tstar = -b / a;
                if (a > T(0)) t_hi = std::min(t_hi, tstar);
                else t_lo = std::max(t_lo, tstar);
            }
        }
        if (empty || t_lo > t_hi || !(t_hi > T(0))) continue;
        out.push_back({s.k, std::max(t_lo, T(0)), t_hi});
    }
    const int owner = [&] {
        for (const auto& s : table.subspaces)
            if (indicator(ray.o, s)) return s.k;
        return -1;
    }();
    std::sort(out.begin(), out.end(), [owner](const TraversalEntry<T>& a, const TraversalEntry<T>& b) {
        const bool ao = a.k == owner, bo = b.k == owner;
        if (ao != bo) return ao;
        return a.t_enter < b.t_enter || (a.t_enter == b.t_enter && a.k < b.k);
    });
}

/// Textual partition dump: per-leaf plane constraints and member ids.
template <typename T>
void dump_partition(const PartitionTable<T>& table, std::ostream& os) {
    const char* kind = table.kind == PartitionKind::kKdTree ? "kdtree" : "fixed-grid";
    std::size_t total = 0;
    for (const auto& m : table.membership) total += m.size();
    os << "partition kind=" << kind << " depth=" << table.depth << " epoch=" << table.epoch
       << " subspaces=" << table.subspaces.size() << " memberships=" << total << "\n";
    for (const auto& s : table.subspaces) {
        os << "subspace " << s.k << " planes=" << s.planes.size() << " members="
           << table.membership[s.k].size() << "\n";
        for (const auto& p : s.planes)
            os << "  plane n=(" << p.n[0] << " " << p.n[1] << " " << p.n[2] << ") d=" << p.d
               << " sense=" << (p.closed ? "closed" : "open") << "\n";
        os << "  members:";
        for (SplatId id : table.membership[s.k]) os << " " << id;
        os << "\n";
    }
}

}  // namespace dgs
