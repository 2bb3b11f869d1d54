#include "dgs/raster.hpp"

#include "oracle_renderer.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

namespace dgs {
namespace {

using testing::central_diff;
using testing::look_at_camera;
using testing::rel_err;

Camera<double> front_camera(int wh = 32, double f = 60) {
    Camera<double> cam;
    cam.width = cam.height = wh;
    cam.fx = cam.fy = f;
    // Principal point on a pixel center so a splat on the optical axis peaks
    // exactly at one sample.
    cam.cx = cam.cy = wh / 2.0 + 0.5;
    return cam;
}

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

TEST(RenderView, EmptySceneIsBackground) {
    const auto cam = front_camera();
    const Vec3<double> bg{0.2, 0.4, 0.6};
    const auto img = render_view<double>({}, cam, bg);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            EXPECT_EQ(img.color.rgb(y, x), bg);
            EXPECT_EQ(img.transmittance.at(y, x, 0), 1.0);
        }
}

TEST(RenderView, FullyOpaqueSplatIsItsColor) {
    const auto cam = front_camera();
    auto s = dc_splat(0, {0, 0, 2}, {0.8, 0.1, 0.3}, 0.5);
    s.opacity_logit = 500.0;  // sigmoid saturates to exactly 1.0 in double
    RenderOptions opts = oracle_options();
    opts.sigma_clamp = 1.0;
    const auto img = render_view<double>(std::span(&s, 1), cam, Vec3<double>{0, 0, 0}, opts);
    const int px = cam.width / 2, py = cam.height / 2;  // center (px+0.5) == cx
    const Vec3<double> expect = eval_sh<double>(s.sh, (s.mu - cam.center()).normalized(), 0);
    EXPECT_EQ(img.color.rgb(py, px), expect);
    EXPECT_EQ(img.transmittance.at(py, px, 0), 0.0);
}

TEST(RenderView, TwoSplatsHandExpanded) {
    const auto cam = front_camera();
    std::vector<Splat<double>> splats{dc_splat(0, {0, 0, 2}, {1, 0, 0}, 0.5),
                                      dc_splat(1, {0, 0, 4}, {0, 1, 0}, 0.5)};
    const auto img = render_view<double>(splats, cam, Vec3<double>::Zero(), oracle_options());
    const Vec3<double> c1 = eval_sh<double>(splats[0].sh, (splats[0].mu - cam.center()).normalized(), 0);
    const Vec3<double> c2 = eval_sh<double>(splats[1].sh, (splats[1].mu - cam.center()).normalized(), 0);
    const Vec3<double> expect = 0.5 * c1 + 0.5 * 0.5 * c2;
    const int px = cam.width / 2, py = cam.height / 2;
    EXPECT_NEAR((img.color.rgb(py, px) - expect).norm(), 0.0, 1e-12);
    EXPECT_NEAR(img.transmittance.at(py, px, 0), 0.25, 1e-12);
}

TEST(RenderRay, MatchesViewPixelBitForBit) {
    const auto splats = testing::random_splats<float>({.count = 120, .seed = 21});
    const auto cam = look_at_camera<float>(48, 40, 60.0f, {0, 0.5f, -3}, {0, 0, 0});
    const Vec3<float> bg{0.1f, 0.2f, 0.3f};
    const auto img = render_view<float>(splats, cam, bg, oracle_options());
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 40; ++rep) {
        const int x = static_cast<int>(rng() % cam.width);
        const int y = static_cast<int>(rng() % cam.height);
        const auto r = render_ray<float>(splats, cam, float(x) + 0.5f, float(y) + 0.5f, bg, oracle_options());
        EXPECT_EQ(r.color, img.color.rgb(y, x)) << "pixel " << x << "," << y;
        EXPECT_EQ(r.transmittance, img.transmittance.at(y, x, 0));
    }
}

TEST(RenderRay, NoHitsReturnsBackground) {
    const auto cam = front_camera();
    std::vector<Splat<double>> splats{dc_splat(0, {5, 5, 2}, {1, 0, 0}, 0.9, 0.05)};
    const Vec3<double> bg{0.3, 0.3, 0.3};
    const auto r = render_ray<double>(splats, cam, 2.5, 2.5, bg);
    EXPECT_EQ(r.color, bg);
    EXPECT_EQ(r.transmittance, 1.0);
}

TEST(RenderRay, MatchesBruteForceOracle) {
    const auto splats = testing::random_splats<double>({.count = 3, .seed = 77, .sh_degree = 2});
    const auto cam = look_at_camera<double>(32, 32, 55.0, {0.5, -2.8, 0.3}, {0, 0, 0});
    const Vec3<double> bg{0.05, 0.1, 0.15};
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 32.0);
    for (int rep = 0; rep < 60; ++rep) {
        const double px = u(rng), py = u(rng);
        const auto got = render_ray<double>(splats, cam, px, py, bg, oracle_options());
        const auto want = testing::oracle_render_pixel(splats, cam, px, py, bg);
        EXPECT_NEAR((got.color - want.color).norm(), 0.0, 1e-9);
        EXPECT_NEAR(got.transmittance, want.transmittance, 1e-9);
    }
}

TEST(RenderRay, ExplicitRayVariantAgrees) {
    const auto splats = testing::random_splats<double>({.count = 40, .seed = 31});
    const auto cam = look_at_camera<double>(32, 32, 60.0, {0, 0, -3}, {0, 0, 0});
    const Vec3<double> bg = Vec3<double>::Zero();
    const auto direct = render_ray<double>(splats, cam, 10.5, 17.5, bg, oracle_options());
    const auto via_ray = render_ray<double>(splats, cam, pixel_ray(cam, 10, 17), bg, oracle_options());
    EXPECT_NEAR((direct.color - via_ray.color).norm(), 0.0, 1e-12);
}

TEST(RenderView, OrderStabilityUnderPermutation) {
    auto splats = testing::random_splats<float>({.count = 90, .seed = 13});
    const auto cam = look_at_camera<float>(40, 32, 60.0f, {1, 1, -3}, {0, 0, 0});
    const Vec3<float> bg{0.5f, 0.5f, 0.5f};
    const auto img0 = render_view<float>(splats, cam, bg, oracle_options());
    std::shuffle(splats.begin(), splats.end(), std::mt19937_64(2));
    const auto img1 = render_view<float>(splats, cam, bg, oracle_options());
    EXPECT_EQ(img0.color.data, img1.color.data);
    EXPECT_EQ(img0.transmittance.data, img1.transmittance.data);
}

TEST(RenderView, EnergyBound) {
    const auto splats = testing::random_splats<double>({.count = 150, .seed = 55});
    const auto cam = look_at_camera<double>(32, 32, 60.0, {0, -3, 0}, {0, 0, 0});
    const Vec3<double> bg{1.0, 0.0, 0.5};
    const auto img = render_view<double>(splats, cam, bg);
    for (double v : img.color.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0 + 1e-12);
    }
    for (double v : img.transmittance.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Composite, TransmittanceMonotone) {
    const auto splats = testing::random_splats<double>({.count = 200, .seed = 17});
    const auto cam = look_at_camera<double>(24, 24, 70.0, {0, 0, -2.5}, {0, 0, 0});
    const auto scene = detail::project_scene<double>(splats, cam, {});
    std::vector<detail::Contribution<double>> contribs;
    for (int y = 0; y < cam.height; y += 3) {
        for (int x = 0; x < cam.width; x += 3) {
            const Ray<double> ray = pixel_ray(cam, x, y);
            const Vec2<double> pix{x + 0.5, y + 0.5};
            detail::collect_contributions(scene, scene.candidates(x, y), ray, pix, RenderOptions{},
                                          detail::AcceptAll<double>{}, contribs);
            double t = 1.0;
            for (const auto& c : contribs) {
                const double t_next = t * (1.0 - c.sigma);
                EXPECT_LE(t_next, t);
                t = t_next;
            }
        }
    }
}

TEST(RenderBackward, ZeroGradsInZeroGradsOut) {
    const auto splats = testing::random_splats<double>({.count = 20, .seed = 3});
    const auto cam = look_at_camera<double>(16, 16, 60.0, {0, 0, -3}, {0, 0, 0});
    const Image<double> gc(16, 16, 3), gt(16, 16, 1);
    const auto grads = render_backward<double>(splats, cam, gc, gt, Vec3<double>::Zero());
    for (const auto& v : grads.d_mu) EXPECT_EQ(v, Vec3<double>::Zero());
    for (double v : grads.d_opacity_logit) EXPECT_EQ(v, 0.0);
}

// Weighted sums of the color and transmittance maps give a scalar loss whose
// analytic gradient must match central finite differences.
struct FdProbe {
    std::vector<Splat<double>> splats;
    Camera<double> cam;
    Vec3<double> bg{0.15, 0.25, 0.35};
    Image<double> w_color, w_trans;
    RenderOptions opts = oracle_options();

    double loss() const {
        const auto img = render_view<double>(splats, cam, bg, opts);
        double l = 0;
        for (std::size_t i = 0; i < img.color.data.size(); ++i) l += img.color.data[i] * w_color.data[i];
        for (std::size_t i = 0; i < img.transmittance.data.size(); ++i)
            l += img.transmittance.data[i] * w_trans.data[i];
        return l;
    }

    GradBuffers<double> analytic() const {
        return render_backward<double>(splats, cam, w_color, w_trans, bg, opts);
    }
};

FdProbe make_probe(int n_splats, std::uint64_t seed) {
    FdProbe p;
    p.splats = testing::random_splats<double>(
        {.count = n_splats, .seed = seed, .sh_degree = 2, .scale_min = 0.08, .scale_max = 0.2});
    p.cam = look_at_camera<double>(20, 20, 60.0, {0.3, -2.8, 0.4}, {0, 0, 0});
    p.w_color = Image<double>(20, 20, 3);
    p.w_trans = Image<double>(20, 20, 1);
    std::mt19937_64 rng(seed ^ 0xabcdef);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : p.w_color.data) v = u(rng);
    for (auto& v : p.w_trans.data) v = u(rng);
    return p;
}

TEST(RenderBackward, SingleSplatOpacityMatchesFiniteDifference) {
    FdProbe p = make_probe(1, 41);
    const auto grads = p.analytic();
    const double fd = central_diff(&p.splats[0].opacity_logit, 1e-5, [&] { return p.loss(); });
    EXPECT_LT(rel_err(grads.d_opacity_logit[0], fd), 1e-4) << grads.d_opacity_logit[0] << " vs " << fd;
}

TEST(RenderBackward, AllGroupsMatchFiniteDifferences) {
    FdProbe p = make_probe(12, 67);
    const auto grads = p.analytic();
    const double h = 1e-5, tol = 1e-3;
    for (std::size_t i = 0; i < p.splats.size(); i += 3) {
        for (int a = 0; a < 3; ++a) {
            EXPECT_LT(rel_err(grads.d_mu[i][a], central_diff(&p.splats[i].mu[a], h, [&] { return p.loss(); })), tol)
                << "d_mu splat " << i << " axis " << a;
            EXPECT_LT(rel_err(grads.d_log_scale[i][a],
                              central_diff(&p.splats[i].log_scale[a], h, [&] { return p.loss(); })), tol)
                << "d_log_scale splat " << i << " axis " << a;
        }
        for (int a = 0; a < 4; ++a)
            EXPECT_LT(rel_err(grads.d_rotation[i][a],
                              central_diff(&p.splats[i].rotation[a], h, [&] { return p.loss(); })), tol)
                << "d_rotation splat " << i << " comp " << a;
        EXPECT_LT(rel_err(grads.d_opacity_logit[i],
                          central_diff(&p.splats[i].opacity_logit, h, [&] { return p.loss(); })), tol)
            << "d_opacity splat " << i;
        for (std::size_t j = 0; j < p.splats[i].sh.size(); j += 3)
            EXPECT_LT(rel_err(grads.d_sh[i][j][1],
                              central_diff(&p.splats[i].sh[j][1], h, [&] { return p.loss(); })), tol)
                << "d_sh splat " << i << " coeff " << j;
    }
}

TEST(RenderBackward, EarlyTerminationReplaysForward) {
    FdProbe p = make_probe(30, 91);
    p.opts = RenderOptions{};  // default termination threshold
    const auto grads = p.analytic();
    const double fd = central_diff(&p.splats[4].mu[0], 1e-5, [&] { return p.loss(); });
    EXPECT_LT(rel_err(grads.d_mu[4][0], fd), 1e-3);
}

}  // namespace
}  // namespace dgs
