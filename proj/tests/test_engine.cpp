#include "dgs/engine.hpp"

#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>

namespace dgs {
namespace {

using testing::central_diff;
using testing::gather_members;
using testing::look_at_camera;
using testing::rel_err;

Subspace<double> whole_space() { return Subspace<double>{}; }

Splat<double> dc_splat(SplatId id, const Vec3<double>& mu, const Vec3<double>& color, double alpha,
                       double scale = 0.2) {
    Splat<double> s;
    s.id = id;
    s.mu = mu;
    s.log_scale = Vec3<double>::Constant(std::log(scale));
    s.opacity_logit = logit(alpha);
    s.sh = {Vec3<double>{(color[0] - 0.5) / sh::kC0, (color[1] - 0.5) / sh::kC0,
                         (color[2] - 0.5) / sh::kC0}};
    return s;
}

Camera<double> front_camera(int wh = 32, double f = 60) {
    Camera<double> cam;
    cam.width = cam.height = wh;
    cam.fx = cam.fy = f;
    cam.cx = cam.cy = wh / 2.0 + 0.5;
    return cam;
}

/// In-process reference of the distributed render path: per-subset partials,
/// per-pixel orders, merge.
template <typename T>
RenderedImage<T> render_distributed_local(std::span<const Splat<T>> splats, PartitionTable<T>& table,
                                          const Camera<T>& cam, const Vec3<T>& bg,
                                          const RenderOptions& opts) {
    assign_subsets<T>(table, splats, opts.truncation_radius);
    const auto members = gather_members<T>(splats, table.membership);
    std::vector<PartialImage<T>> partials;
    for (int k = 0; k < table.subset_count(); ++k)
        partials.push_back(partial_render<T>(members[k], table.subspaces[k], cam, opts));
    const PixelOrders orders = compute_pixel_orders(table, cam);
    return merge<T>(partials, orders, bg);
}

TEST(PartialRender, EmptySubsetIsZeroOne) {
    const auto cam = front_camera(16);
    const auto p = partial_render<double>({}, whole_space(), cam, oracle_options());
    for (double v : p.color.data) EXPECT_EQ(v, 0.0);
    for (double v : p.transmittance.data) EXPECT_EQ(v, 1.0);
}

TEST(PartialRender, SingleContributorSigma06) {
    const auto cam = front_camera();
    std::vector<Splat<double>> splats{dc_splat(0, {0, 0, 2}, {1, 0, 0}, 0.6)};
    const auto p = partial_render<double>(splats, whole_space(), cam, oracle_options());
    const int px = cam.width / 2, py = cam.height / 2;
    const Vec3<double> c1 = eval_sh<double>(splats[0].sh, (splats[0].mu - cam.center()).normalized(), 0);
    EXPECT_NEAR(p.color.rgb(py, px)[0], 0.6 * c1[0], 1e-12);
    EXPECT_NEAR(p.transmittance.at(py, px, 0), 0.4, 1e-12);
}

TEST(PartialRender, OverlapSplatContributesOnlyWhereItsIntersectionLies) {
    // Split at x = 0; one splat just right of the plane, member of both subsets.
    std::vector<Vec3<double>> centers{{-1, 0, 0}, {-0.5, 0, 0}, {0.5, 0, 0}, {1, 0, 0}};
    auto table = build_kdtree<double>(centers, 1);
    std::vector<Splat<double>> splats{dc_splat(0, {0.05, 0, 2}, {1, 1, 1}, 0.8, 0.1)};
    assign_subsets<double>(table, splats);
    ASSERT_EQ(table.membership[0].size(), 1u);
    ASSERT_EQ(table.membership[1].size(), 1u);

    const auto cam = front_camera();
    // The ray through the splat center: its intersection point is the center,
    // inside the right subspace, so the left partial must stay (0,1).
    const auto proj = project_splat(splats[0], cam);
    ASSERT_TRUE(proj.has_value());
    const double px = proj->mean2d[0], py = proj->mean2d[1];
    const auto left = partial_render_ray<double>(splats, table.subspaces[0], cam, px, py, oracle_options());
    const auto right = partial_render_ray<double>(splats, table.subspaces[1], cam, px, py, oracle_options());
    EXPECT_EQ(left.color, Vec3<double>::Zero());
    EXPECT_EQ(left.transmittance, 1.0);
    EXPECT_GT(right.color[0], 0.0);
    EXPECT_LT(right.transmittance, 1.0);
}

TEST(PartialRender, StaysBackgroundFree) {
    const auto splats = testing::random_splats<double>({.count = 50, .seed = 2});
    const auto cam = look_at_camera<double>(24, 24, 60.0, {0, 0, -3}, {0, 0, 0});
    const auto p = partial_render<double>(splats, whole_space(), cam, oracle_options());
    // A miss pixel carries (0,1); any background would show up as nonzero color.
    bool found_miss = false;
    for (int y = 0; y < 24 && !found_miss; ++y)
        for (int x = 0; x < 24 && !found_miss; ++x)
            if (p.transmittance.at(y, x, 0) == 1.0) {
                EXPECT_EQ(p.color.rgb(y, x), Vec3<double>::Zero());
                found_miss = true;
            }
    EXPECT_TRUE(found_miss);
}

PixelOrders single_pixel_orders(std::initializer_list<int> ks, int subset_count) {
    PixelOrders po;
    po.width = po.height = 1;
    po.subset_count = subset_count;
    po.order.assign(subset_count, 0);
    po.count = {static_cast<std::uint16_t>(ks.size())};
    std::size_t i = 0;
    for (int k : ks) po.order[i++] = static_cast<std::uint16_t>(k);
    return po;
}

PartialImage<double> constant_partial(int k, double c, double t) {
    PartialImage<double> p;
    p.k = k;
    p.color = Image<double>(1, 1, 3, c);
    p.transmittance = Image<double>(1, 1, 1, t);
    return p;
}

TEST(Merge, SingleSubsetIdentity) {
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.25, 0.6)};
    const Vec3<double> bg{0.5, 0.5, 0.5};
    const auto img = merge<double>(partials, single_pixel_orders({0}, 1), bg);
    EXPECT_NEAR(img.color.at(0, 0, 0), 0.25 + 0.6 * 0.5, 1e-15);
    EXPECT_NEAR(img.transmittance.at(0, 0, 0), 0.6, 1e-15);
}

TEST(Merge, TwoSubsetHandValue) {
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.3, 0.5),
                                               constant_partial(1, 0.4, 0.8)};
    const auto img = merge<double>(partials, single_pixel_orders({0, 1}, 2), Vec3<double>::Zero());
    EXPECT_NEAR(img.color.at(0, 0, 0), 0.3 + 0.5 * 0.4, 1e-15);
    EXPECT_NEAR(img.transmittance.at(0, 0, 0), 0.4, 1e-15);
}

TEST(Merge, MissingSubsetIsAnError) {
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.3, 0.5)};
    EXPECT_THROW(
        {
            try {
                merge<double>(partials, single_pixel_orders({0, 1}, 2), Vec3<double>::Zero());
            } catch (const std::invalid_argument& e) {
                EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
                throw;
            }
        },
        std::invalid_argument);
}

TEST(Merge, SkippedIdleSubsetIsANoOp) {
    // Subset 1 never entered by the pixel's ray: merging with or without it is
    // exact as long as it holds (0,1).
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.3, 0.5),
                                               constant_partial(1, 0.0, 1.0)};
    const Vec3<double> bg{0.9, 0.9, 0.9};
    const auto with = merge<double>(partials, single_pixel_orders({0, 1}, 2), bg);
    const auto without = merge<double>(partials, single_pixel_orders({0}, 2), bg);
    EXPECT_EQ(with.color.data, without.color.data);
    EXPECT_EQ(with.transmittance.data, without.transmittance.data);
}

TEST(Merge, EquivalenceWithMonolithicRender) {
    for (const std::uint64_t seed : {101u, 202u}) {
        const auto splats = testing::random_splats<double>({.count = 600, .seed = seed, .sh_degree = 1});
        std::vector<Vec3<double>> centers;
        for (const auto& s : splats) centers.push_back(s.mu);
        const auto cam = look_at_camera<double>(48, 40, 60.0, {0.4, -3.0, 0.6}, {0, 0, 0});
        const Vec3<double> bg{0.12, 0.34, 0.56};
        const auto mono = render_view<double>(splats, cam, bg, oracle_options());
        for (int depth : {1, 2, 3}) {
            auto table = build_kdtree<double>(centers, depth);
            const auto dist = render_distributed_local<double>(splats, table, cam, bg, oracle_options());
            double max_err = 0;
            for (std::size_t i = 0; i < mono.color.data.size(); ++i)
                max_err = std::max(max_err, std::abs(mono.color.data[i] - dist.color.data[i]));
            EXPECT_LT(max_err, 1e-9) << "depth " << depth << " seed " << seed;
        }
    }
}

TEST(Merge, EquivalenceSinglePrecision) {
    const auto splats = testing::random_splats<float>({.count = 800, .seed = 11, .sh_degree = 1});
    std::vector<Vec3<float>> centers;
    for (const auto& s : splats) centers.push_back(s.mu);
    const auto cam = look_at_camera<float>(40, 40, 60.0f, {0, -3, 0.5f}, {0, 0, 0});
    const Vec3<float> bg{0.2f, 0.3f, 0.4f};
    const auto mono = render_view<float>(splats, cam, bg, oracle_options());
    auto table = build_kdtree<float>(centers, 2);
    const auto dist = render_distributed_local<float>(splats, table, cam, bg, oracle_options());
    float max_err = 0;
    for (std::size_t i = 0; i < mono.color.data.size(); ++i)
        max_err = std::max(max_err, std::abs(mono.color.data[i] - dist.color.data[i]));
    EXPECT_LT(max_err, 1e-4f);
}

TEST(MergeBackward, SingleSubsetChainRule) {
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.25, 0.6)};
    const auto orders = single_pixel_orders({0}, 1);
    Image<double> gc(1, 1, 3);
    gc.set_rgb(0, 0, {1.0, -0.5, 2.0});
    Image<double> gt(1, 1, 1, 0.7);
    const Vec3<double> bg{0.1, 0.2, 0.3};
    const auto grads = merge_backward<double>(partials, orders, gc, gt, bg);
    EXPECT_EQ(grads[0].d_color.rgb(0, 0), gc.rgb(0, 0));
    const double expect_t = gc.rgb(0, 0).dot(bg) + 0.7;
    EXPECT_NEAR(grads[0].d_transmittance.at(0, 0, 0), expect_t, 1e-15);
}

TEST(MergeBackward, TwoSubsetHandDerivative) {
    std::vector<PartialImage<double>> partials{constant_partial(0, 0.3, 0.5),
                                               constant_partial(1, 0.4, 0.8)};
    const auto orders = single_pixel_orders({0, 1}, 2);
    Image<double> gc(1, 1, 3);
    gc.set_rgb(0, 0, {1.0, 0.0, 0.0});
    const Image<double> gt(1, 1, 1, 0.0);
    const auto grads = merge_backward<double>(partials, orders, gc, gt, Vec3<double>::Zero());
    // dC/dT_1 = C_2 = 0.4 for the red channel functional.
    EXPECT_NEAR(grads[0].d_transmittance.at(0, 0, 0), 0.4, 1e-15);
    // dC/dC_2 = T_1 = 0.5.
    EXPECT_NEAR(grads[1].d_color.at(0, 0, 0), 0.5, 1e-15);
}

TEST(MergeBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(400);
    std::uniform_real_distribution<double> u01(0.05, 0.95);
    const int K = 4, W = 3, H = 2;
    std::vector<PartialImage<double>> partials;
    for (int k = 0; k < K; ++k) {
        PartialImage<double> p;
        p.k = k;
        p.color = Image<double>(W, H, 3);
        p.transmittance = Image<double>(W, H, 1);
        for (auto& v : p.color.data) v = u01(rng);
        for (auto& v : p.transmittance.data) v = u01(rng);
        partials.push_back(std::move(p));
    }
    // Random per-pixel orders with variable live prefixes.
    PixelOrders orders;
    orders.width = W;
    orders.height = H;
    orders.subset_count = K;
    orders.order.assign(std::size_t(W) * H * K, 0);
    orders.count.assign(std::size_t(W) * H, 0);
    for (std::size_t p = 0; p < orders.count.size(); ++p) {
        std::vector<std::uint16_t> perm{0, 1, 2, 3};
        std::shuffle(perm.begin(), perm.end(), rng);
        orders.count[p] = static_cast<std::uint16_t>(1 + rng() % K);
        for (int i = 0; i < orders.count[p]; ++i) orders.order[p * K + i] = perm[i];
    }
    const Vec3<double> bg{0.3, 0.6, 0.1};
    Image<double> w_color(W, H, 3), w_trans(W, H, 1);
    std::uniform_real_distribution<double> w(-1.0, 1.0);
    for (auto& v : w_color.data) v = w(rng);
    for (auto& v : w_trans.data) v = w(rng);

    auto loss = [&] {
        const auto img = merge<double>(partials, orders, bg);
        double l = 0;
        for (std::size_t i = 0; i < img.color.data.size(); ++i) l += img.color.data[i] * w_color.data[i];
        for (std::size_t i = 0; i < img.transmittance.data.size(); ++i)
            l += img.transmittance.data[i] * w_trans.data[i];
        return l;
    };
    const auto grads = merge_backward<double>(partials, orders, w_color, w_trans, bg);
    for (int k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < partials[k].color.data.size(); i += 5) {
            const double fd = central_diff(&partials[k].color.data[i], 1e-6, loss);
            EXPECT_NEAR(grads[k].d_color.data[i], fd, 1e-6) << "C_" << k << "[" << i << "]";
        }
        for (std::size_t i = 0; i < partials[k].transmittance.data.size(); i += 2) {
            const double fd = central_diff(&partials[k].transmittance.data[i], 1e-6, loss);
            EXPECT_NEAR(grads[k].d_transmittance.data[i], fd, 1e-6) << "T_" << k << "[" << i << "]";
        }
    }
}

TEST(SingleContribution, EachSplatTakesEffectAtMostOnce) {
    const auto splats = testing::random_splats<double>({.count = 300, .seed = 71, .scale_max = 0.3});
    std::vector<Vec3<double>> centers;
    for (const auto& s : splats) centers.push_back(s.mu);
    auto table = build_kdtree<double>(centers, 2);
    assign_subsets<double>(table, splats);
    const auto members = gather_members<double>(splats, table.membership);
    const auto cam = look_at_camera<double>(32, 32, 65.0, {0, -3, 0}, {0, 0, 0});

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 32.0);
    const auto opts = oracle_options();
    for (int rep = 0; rep < 200; ++rep) {
        const double px = u(rng), py = u(rng);
        std::map<SplatId, int> counts;
        for (int k = 0; k < table.subset_count(); ++k) {
            std::vector<SplatId> ids;
            partial_render_ray<double>(members[k], table.subspaces[k], cam, px, py, opts, &ids);
            for (SplatId id : ids) ++counts[id];
        }
        for (const auto& [id, n] : counts) EXPECT_EQ(n, 1) << "splat " << id;
        // The union across subsets is exactly the monolithic contributor set.
        std::vector<SplatId> mono_ids;
        render_ray<double>(splats, cam, px, py, Vec3<double>::Zero(), opts, &mono_ids);
        EXPECT_EQ(mono_ids.size(), counts.size());
        for (SplatId id : mono_ids) EXPECT_EQ(counts.count(id), 1u);
    }
}

// --- Boundary validity -------------------------------------------------------

std::vector<Splat<double>> mirrored_scene(int n_pairs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Splat<double>> splats;
    SplatId id = 0;
    for (int i = 0; i < n_pairs; ++i) {
        // Mirror-symmetric pair about x = 0; some pairs hug the plane so the
        // subsets genuinely overlap. x spans the widest extent so the depth-1
        // KD split lands on it (and, by symmetry, exactly at 0).
        const double x = (i % 4 == 0) ? 0.02 + 0.05 * u01(rng) : 0.2 + 0.8 * u01(rng);
        const double y = 1.2 * u01(rng) - 0.6, z = 1.2 * u01(rng) - 0.6;
        const Vec3<double> color{u01(rng) * 0.8 + 0.1, u01(rng) * 0.8 + 0.1, u01(rng) * 0.8 + 0.1};
        const double alpha = 0.4 + 0.5 * u01(rng);
        const double scale = 0.05 + 0.1 * u01(rng);
        Splat<double> s;
        s.log_scale = {std::log(scale), std::log(scale * (0.6 + 0.8 * u01(rng))), std::log(scale)};
        s.opacity_logit = logit(alpha);
        s.sh = {Vec3<double>{(color[0] - 0.5) / sh::kC0, (color[1] - 0.5) / sh::kC0,
                             (color[2] - 0.5) / sh::kC0}};
        s.mu = {x, y, z};
        s.id = id++;
        splats.push_back(s);
        s.mu = {-x, y, z};
        s.id = id++;
        splats.push_back(s);
    }
    return splats;
}

struct BoundaryFixture {
    std::vector<Splat<double>> splats = mirrored_scene(150, 303);
    PartitionTable<double> table;
    Camera<double> cam;

    BoundaryFixture() {
        std::vector<Vec3<double>> centers;
        for (const auto& s : splats) centers.push_back(s.mu);
        table = build_kdtree<double>(centers, 1);
        // Mirror symmetry puts the dividing plane exactly at x = 0.
        EXPECT_DOUBLE_EQ(table.subspaces[0].planes[0].d, 0.0);
        assign_subsets<double>(table, splats);
        cam = Camera<double>{};
        cam.width = cam.height = 64;
        cam.fx = cam.fy = 64.0;
        cam.cx = cam.cy = 32.0;
        cam.t_wc = {0, 0, 4};  // camera at (0,0,-4) looking +z: axis lies in x = 0
    }
};

TEST(BoundaryValidity, CompliantEngineHasCrispHalves) {
    BoundaryFixture f;
    const auto report = boundary_validity_test<double>(f.splats, f.table, f.cam, oracle_options());
    EXPECT_TRUE(report.passed);
    EXPECT_GT(report.checked_pixels, 0u);
    EXPECT_TRUE(report.offenders.empty());
}

TEST(BoundaryValidity, DisabledIndicatorFailsTheTest) {
    BoundaryFixture f;
    auto opts = oracle_options();
    opts.indicator_enabled = false;
    const auto report = boundary_validity_test<double>(f.splats, f.table, f.cam, opts);
    EXPECT_FALSE(report.passed);
    EXPECT_FALSE(report.offenders.empty());
}

TEST(BoundaryValidity, MirroredSceneGivesMirroredPartials) {
    BoundaryFixture f;
    const auto report = boundary_validity_test<double>(f.splats, f.table, f.cam, oracle_options());
    ASSERT_EQ(report.partials.size(), 2u);
    const auto& a = report.partials[0];
    const auto& b = report.partials[1];
    for (int y = 0; y < f.cam.height; ++y)
        for (int x = 0; x < f.cam.width; ++x) {
            const int xm = f.cam.width - 1 - x;
            EXPECT_NEAR((a.color.rgb(y, x) - b.color.rgb(y, xm)).norm(), 0.0, 1e-6);
            EXPECT_NEAR(a.transmittance.at(y, x, 0) - b.transmittance.at(y, xm, 0), 0.0, 1e-6);
        }
}

}  // namespace
}  // namespace dgs
