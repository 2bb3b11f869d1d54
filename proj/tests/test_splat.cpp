#include "dgs/splat.hpp"

#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <random>

namespace dgs {
namespace {

using testing::look_at_camera;
using testing::quat_from_rotation;

Splat<double> unit_splat() {
    Splat<double> s;
    s.id = 7;
    s.sh = {Vec3<double>::Zero()};
    return s;
}

TEST(GaussianWeight, PeaksAtCenter) {
    auto s = unit_splat();
    s.mu = {0.3, -1.2, 4.0};
    EXPECT_DOUBLE_EQ(gaussian_weight(s, s.mu), 1.0);
}

TEST(GaussianWeight, IdentityCovarianceUnitOffset) {
    auto s = unit_splat();
    const Vec3<double> x = s.mu + Vec3<double>{1, 0, 0};
    EXPECT_NEAR(gaussian_weight(s, x), 0.60653065971263342, 1e-15);
}

TEST(GaussianWeight, TruncatesBeyondRadius) {
    auto s = unit_splat();
    const Vec3<double> far = s.mu + Vec3<double>{4, 0, 0};
    const Vec3<double> near_pt = s.mu + Vec3<double>{2.9, 0, 0};
    EXPECT_EQ(gaussian_weight(s, far), 0.0);
    EXPECT_GT(gaussian_weight(s, near_pt), 0.0);
}

TEST(GaussianWeight, DegenerateCovarianceThrows) {
    auto s = unit_splat();
    s.log_scale = {0.0, 0.0, std::log(1e-7)};
    EXPECT_THROW(gaussian_weight(s, s.mu), std::domain_error);
}

TEST(GaussianWeight, RotationInvariance) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g;
    for (int rep = 0; rep < 50; ++rep) {
        Splat<double> s = unit_splat();
        s.log_scale = {g(rng) * 0.3, g(rng) * 0.3, g(rng) * 0.3};
        s.rotation = Vec4<double>{g(rng), g(rng), g(rng), g(rng)}.normalized();
        const Vec3<double> offset{g(rng) * 0.4, g(rng) * 0.4, g(rng) * 0.4};
        const Vec3<double> x0 = s.mu + offset;
        const double w0 = gaussian_weight(s, x0);

        // Apply an extra world rotation to both the splat frame and the offset.
        const Vec4<double> qe = Vec4<double>{g(rng), g(rng), g(rng), g(rng)}.normalized();
        const Mat3<double> extra = rotation_from_quat(qe);
        Splat<double> s2 = s;
        s2.rotation = quat_from_rotation<double>(Mat3<double>(extra * rotation_from_quat(s.rotation)));
        const Vec3<double> x1 = s.mu + extra * offset;
        const double w1 = gaussian_weight(s2, x1);
        EXPECT_NEAR(w0, w1, 1e-10);
    }
}

TEST(EvalSh, ZeroDcIsMidGray) {
    std::vector<Vec3<double>> sh{Vec3<double>::Zero()};
    const Vec3<double> c = eval_sh<double>(sh, Vec3<double>{0, 0, 1}, 0);
    EXPECT_DOUBLE_EQ(c[0], 0.5);
    EXPECT_DOUBLE_EQ(c[1], 0.5);
    EXPECT_DOUBLE_EQ(c[2], 0.5);
}

TEST(EvalSh, UnitDcValue) {
    std::vector<Vec3<double>> sh{Vec3<double>::Ones()};
    const Vec3<double> c = eval_sh<double>(sh, Vec3<double>{0.3, -0.4, 0.86}.normalized(), 0);
    EXPECT_NEAR(c[0], 0.78209479177387814, 1e-15);
    EXPECT_NEAR(c[1], 0.78209479177387814, 1e-15);
}

TEST(EvalSh, Degree0IsViewIndependent) {
    std::vector<Vec3<double>> sh(16, Vec3<double>::Zero());
    sh[0] = {0.4, -0.2, 1.1};
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    const Vec3<double> ref = eval_sh<double>(sh, Vec3<double>{0, 0, 1}, 3);
    for (int i = 0; i < 100; ++i) {
        const Vec3<double> dir = Vec3<double>{g(rng), g(rng), g(rng)}.normalized();
        const Vec3<double> c = eval_sh<double>(sh, dir, 3);
        EXPECT_EQ(c[0], ref[0]);
        EXPECT_EQ(c[1], ref[1]);
        EXPECT_EQ(c[2], ref[2]);
    }
}

TEST(EvalSh, DegreeAboveStoredThrows) {
    std::vector<Vec3<double>> sh{Vec3<double>::Zero()};
    EXPECT_THROW(eval_sh<double>(sh, Vec3<double>{0, 0, 1}, 1), std::invalid_argument);
}

Camera<double> identity_camera(int wh = 100, double f = 100, double c = 50) {
    Camera<double> cam;
    cam.width = cam.height = wh;
    cam.fx = cam.fy = f;
    cam.cx = cam.cy = c;
    return cam;
}

TEST(ProjectSplat, OnAxisHitsPrincipalPoint) {
    auto s = unit_splat();
    s.mu = {0, 0, 2};
    s.log_scale = Vec3<double>::Constant(std::log(0.1));
    const auto p = project_splat(s, identity_camera());
    ASSERT_TRUE(p.has_value());
    EXPECT_NEAR(p->mean2d[0], 50.0, 1e-12);
    EXPECT_NEAR(p->mean2d[1], 50.0, 1e-12);
    EXPECT_NEAR(p->depth_key, 2.0, 1e-12);
}

TEST(ProjectSplat, BehindCameraCulled) {
    auto s = unit_splat();
    s.mu = {0, 0, -1};
    EXPECT_FALSE(project_splat(s, identity_camera()).has_value());
}

TEST(ProjectSplat, IsotropicOnAxisCovariance) {
    auto s = unit_splat();
    s.mu = {0, 0, 2};
    s.log_scale = Vec3<double>::Constant(std::log(0.1));
    const auto p = project_splat(s, identity_camera());
    ASSERT_TRUE(p.has_value());
    const double expected = std::pow(100.0 * 0.1 / 2.0, 2) + 0.3;
    EXPECT_NEAR(p->cov2d(0, 0), expected, 1e-9);
    EXPECT_NEAR(p->cov2d(1, 1), expected, 1e-9);
    EXPECT_NEAR(p->cov2d(0, 1), 0.0, 1e-9);
}

TEST(ProjectSplat, MeanMatchesPinholeModel) {
    const auto splats = testing::random_splats<double>({.count = 60, .seed = 5});
    const auto cam = look_at_camera<double>(64, 48, 60.0, {2.5, 1.0, -2.5}, {0, 0, 0});
    for (const auto& s : splats) {
        const auto p = project_splat(s, cam);
        if (!p) continue;
        const Vec3<double> tc = cam.to_camera(s.mu);
        EXPECT_NEAR(p->mean2d[0], cam.fx * tc[0] / tc[2] + cam.cx, 1e-9);
        EXPECT_NEAR(p->mean2d[1], cam.fy * tc[1] / tc[2] + cam.cy, 1e-9);
        EXPECT_GT(p->depth_key, 0.01);
    }
}

TEST(ProjectSplat, CovarianceEigenvaluesAboveRegularizationFloor) {
    const auto splats = testing::random_splats<double>({.count = 80, .seed = 9, .scale_min = 0.001, .scale_max = 0.3});
    const auto cam = look_at_camera<double>(64, 64, 55.0, {0, -3, 0.5}, {0, 0, 0});
    int projected = 0;
    for (const auto& s : splats) {
        const auto p = project_splat(s, cam);
        if (!p) continue;
        ++projected;
        const Vec2<double> ev = sym2x2_eigenvalues(p->cov2d);
        EXPECT_GE(ev[0], 0.3 - 1e-12);
    }
    EXPECT_GT(projected, 0);
}

TEST(Eval2d, PeakAndFalloff) {
    Splat2D<double> s;
    s.mean2d = {10.5, 20.5};
    const Vec2<double> at_mean{10.5, 20.5};
    EXPECT_DOUBLE_EQ(eval_2d(s, at_mean), 1.0);
    EXPECT_NEAR(eval_2d(s, Vec2<double>{11.5, 20.5}), 0.60653065971263342, 1e-15);
    EXPECT_EQ(eval_2d(s, Vec2<double>{14.0, 20.5}), 0.0);  // Mahalanobis 3.5 > 3
}

TEST(Camera, ValidateRejectsBadIntrinsics) {
    Camera<double> cam = identity_camera();
    cam.validate();
    cam.fx = 0;
    EXPECT_THROW(cam.validate(), std::invalid_argument);
    cam = identity_camera();
    cam.cx = 120;
    EXPECT_THROW(cam.validate(), std::invalid_argument);
}

TEST(Camera, PixelRayIsUnitAndCentered) {
    const auto cam = look_at_camera<double>(64, 48, 60.0, {1, 2, 3}, {0, 0, 0});
    const Ray<double> r = pixel_ray(cam, 10, 20);
    EXPECT_NEAR(r.d.norm(), 1.0, 1e-12);
    // The ray through the principal point is the optical axis.
    const Ray<double> axis = pixel_ray(cam, cam.cx, cam.cy);
    EXPECT_NEAR((axis.d - cam.forward_axis()).norm(), 0.0, 1e-12);
}

}  // namespace
}  // namespace dgs
