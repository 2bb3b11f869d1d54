#pragma once

#include "dgs/math.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace dgs {

/// One anisotropic 3D Gaussian primitive. The covariance is factored as
/// R(q) S S^T R(q)^T with S = diag(exp(log_scale)), which keeps every
/// parameter unconstrained under gradient updates.
template <typename T>
struct Splat {
    SplatId id = 0;
    Vec3<T> mu = Vec3<T>::Zero();
    Vec3<T> log_scale = Vec3<T>::Zero();
    Vec4<T> rotation{T(1), T(0), T(0), T(0)};  // (w,x,y,z), renormalized before use
    T opacity_logit = T(0);
    std::vector<Vec3<T>> sh;  // (deg+1)^2 coefficients, each a per-channel triple

    int sh_degree() const {
        switch (sh.size()) {
            case 1: return 0;
            case 4: return 1;
            case 9: return 2;
            case 16: return 3;
            default: throw std::invalid_argument("splat sh coefficient count must be (deg+1)^2, deg<=3");
        }
    }
    T alpha() const { return sigmoid(opacity_logit); }
    Vec3<T> scales() const { return log_scale.array().exp(); }
    T max_scale() const { return scales().maxCoeff(); }
};

/// Pinhole view. q_wc/t_wc map world to camera: x_cam = R(q_wc) x_world + t_wc
/// (COLMAP rotation convention, +z forward).
template <typename T>
struct Camera {
    int width = 0, height = 0;
    T fx = T(0), fy = T(0), cx = T(0), cy = T(0);
    Vec4<T> q_wc{T(1), T(0), T(0), T(0)};
    Vec3<T> t_wc = Vec3<T>::Zero();

    void validate() const {
        if (width <= 0 || height <= 0) throw std::invalid_argument("camera: non-positive resolution");
        if (!(fx > T(0)) || !(fy > T(0))) throw std::invalid_argument("camera: focal lengths must be positive");
        if (!(cx > T(0)) || !(cx < T(width)) || !(cy > T(0)) || !(cy < T(height)))
            throw std::invalid_argument("camera: principal point outside image");
    }

    Mat3<T> rotation() const { return rotation_from_quat(q_wc); }
    Vec3<T> center() const { return -(rotation().transpose() * t_wc); }
    Vec3<T> to_camera(const Vec3<T>& p_world) const { return rotation() * p_world + t_wc; }
    /// Unit world direction of the optical axis.
    Vec3<T> forward_axis() const { return rotation().row(2).transpose(); }

    template <typename U>
    Camera<U> cast() const {
        Camera<U> c;
        c.width = width;
        c.height = height;
        c.fx = U(fx); c.fy = U(fy); c.cx = U(cx); c.cy = U(cy);
        c.q_wc = q_wc.template cast<U>();
        c.t_wc = t_wc.template cast<U>();
        return c;
    }
};

template <typename T>
struct Ray {
    Vec3<T> o = Vec3<T>::Zero();
    Vec3<T> d = Vec3<T>::UnitZ();
};

/// Ray through the center of pixel (ix, iy), i.e. continuous coordinates
/// (ix + 0.5, iy + 0.5). Direction is unit length.
template <typename T>
inline Ray<T> pixel_ray(const Camera<T>& cam, T px, T py) {
    const Mat3<T> r = cam.rotation();
    Vec3<T> dir_cam{(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, T(1)};
    Ray<T> ray;
    ray.o = -(r.transpose() * cam.t_wc);
    ray.d = (r.transpose() * dir_cam).normalized();
    return ray;
}

template <typename T>
inline Ray<T> pixel_ray(const Camera<T>& cam, int ix, int iy) {
    return pixel_ray(cam, T(ix) + T(0.5), T(iy) + T(0.5));
}

/// A primitive projected into one view. mean2d/cov2d live in continuous pixel
/// coordinates; depth_key is the camera-axis depth used for culling and for
/// the flagged fast ordering. The world-space center and truncation radius
/// ride along so per-ray keys and Eq.-style indicator gating can be evaluated
/// at composite time.
template <typename T>
struct Splat2D {
    SplatId source_id = 0;
    Vec2<T> mean2d = Vec2<T>::Zero();
    Mat2<T> cov2d = Mat2<T>::Identity();
    Mat2<T> inv_cov2d = Mat2<T>::Identity();
    T depth_key = T(0);
    Vec3<T> color = Vec3<T>::Zero();
    T alpha = T(0);
    Vec3<T> mu_world = Vec3<T>::Zero();
    T world_radius = T(0);  // D_i: truncation multiplier x largest semi-axis
};

/// Knobs shared by the monolithic and distributed render paths. Defaults are
/// the production values; oracle_options() is the double-precision testing
/// profile with early termination disabled.
struct RenderOptions {
    double truncation_radius = 3.0;   // Mahalanobis cutoff in 3D and 2D, and the D_i multiplier
    double near_plane = 0.01;
    double sigma_clamp = 0.99;
    double cov2d_regularization = 0.3;
    double stop_threshold = 1e-4;     // 0 disables early termination
    int sh_degree = -1;               // -1: use each splat's stored degree
    bool indicator_enabled = true;    // test hook; disabling breaks boundary validity on purpose
    bool camera_z_order = false;      // fast mode: order by per-view depth instead of per-ray t
};

inline RenderOptions oracle_options() {
    RenderOptions o;
    o.stop_threshold = 0.0;
    return o;
}

// ---------------------------------------------------------------------------
// Spherical harmonics, real basis, 3DGS channel convention.
// ---------------------------------------------------------------------------

namespace sh {

inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.4886025119029199;
inline constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                  -1.0925484305920792, 0.5462742152960396};
inline constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644657,
                                  0.3731763325901154, -0.4570457994644657, 1.445305721320277,
                                  -0.5900435899266435};

/// Basis values for all bands up to `deg` (unused slots left at zero).
template <typename T>
inline std::array<T, 16> basis(const Vec3<T>& d, int deg) {
    std::array<T, 16> b{};
    b[0] = T(kC0);
    if (deg < 1) return b;
    const T x = d[0], y = d[1], z = d[2];
    b[1] = T(-kC1) * y;
    b[2] = T(kC1) * z;
    b[3] = T(-kC1) * x;
    if (deg < 2) return b;
    const T xx = x * x, yy = y * y, zz = z * z;
    const T xy = x * y, yz = y * z, xz = x * z;
    b[4] = T(kC2[0]) * xy;
    b[5] = T(kC2[1]) * yz;
    b[6] = T(kC2[2]) * (T(2) * zz - xx - yy);
    b[7] = T(kC2[3]) * xz;
    b[8] = T(kC2[4]) * (xx - yy);
    if (deg < 3) return b;
    b[9] = T(kC3[0]) * y * (T(3) * xx - yy);
    b[10] = T(kC3[1]) * xy * z;
    b[11] = T(kC3[2]) * y * (T(4) * zz - xx - yy);
    b[12] = T(kC3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    b[13] = T(kC3[4]) * x * (T(4) * zz - xx - yy);
    b[14] = T(kC3[5]) * z * (xx - yy);
    b[15] = T(kC3[6]) * x * (xx - T(3) * yy);
    return b;
}

/// d basis[i] / d direction, rows matching basis().
template <typename T>
inline std::array<Vec3<T>, 16> basis_jacobian(const Vec3<T>& d, int deg) {
    std::array<Vec3<T>, 16> j;
    j.fill(Vec3<T>::Zero());
    if (deg < 1) return j;
    const T x = d[0], y = d[1], z = d[2];
    j[1] = {T(0), T(-kC1), T(0)};
    j[2] = {T(0), T(0), T(kC1)};
    j[3] = {T(-kC1), T(0), T(0)};
    if (deg < 2) return j;
    j[4] = {T(kC2[0]) * y, T(kC2[0]) * x, T(0)};
    j[5] = {T(0), T(kC2[1]) * z, T(kC2[1]) * y};
    j[6] = {T(-2 * kC2[2]) * x, T(-2 * kC2[2]) * y, T(4 * kC2[2]) * z};
    j[7] = {T(kC2[3]) * z, T(0), T(kC2[3]) * x};
    j[8] = {T(2 * kC2[4]) * x, T(-2 * kC2[4]) * y, T(0)};
    if (deg < 3) return j;
    const T xx = x * x, yy = y * y, zz = z * z;
    j[9] = {T(6 * kC3[0]) * x * y, T(kC3[0]) * (T(3) * xx - T(3) * yy), T(0)};
    j[10] = {T(kC3[1]) * y * z, T(kC3[1]) * x * z, T(kC3[1]) * x * y};
    j[11] = {T(-2 * kC3[2]) * x * y, T(kC3[2]) * (T(4) * zz - xx - T(3) * yy), T(8 * kC3[2]) * y * z};
    j[12] = {T(-6 * kC3[3]) * x * z, T(-6 * kC3[3]) * y * z, T(kC3[3]) * (T(6) * zz - T(3) * xx - T(3) * yy)};
    j[13] = {T(kC3[4]) * (T(4) * zz - T(3) * xx - yy), T(-2 * kC3[4]) * x * y, T(8 * kC3[4]) * x * z};
    j[14] = {T(2 * kC3[5]) * x * z, T(-2 * kC3[5]) * y * z, T(kC3[5]) * (xx - yy)};
    j[15] = {T(kC3[6]) * (T(3) * xx - T(3) * yy), T(-6 * kC3[6]) * x * y, T(0)};
    return j;
}

}  // namespace sh

/// Evaluate SH color for a view direction: 0.5 + sum of bands, clamped to >= 0
/// per channel (3DGS convention).
template <typename T>
inline Vec3<T> eval_sh(std::span<const Vec3<T>> coeffs, const Vec3<T>& view_dir, int deg) {
    const int stored = static_cast<int>(std::round(std::sqrt(double(coeffs.size())))) - 1;
    if (deg > stored) throw std::invalid_argument("eval_sh: requested degree exceeds stored coefficients");
    const auto b = sh::basis(view_dir, deg);
    const int n = (deg + 1) * (deg + 1);
    Vec3<T> c = Vec3<T>::Constant(T(0.5));
    for (int i = 0; i < n; ++i) c += b[i] * coeffs[i];
    return c.cwiseMax(T(0));
}

/// Adjoint of eval_sh. d_coeffs must have at least (deg+1)^2 entries; the
/// clamp kills gradients on channels pinned at zero.
template <typename T>
inline void eval_sh_backward(std::span<const Vec3<T>> coeffs, const Vec3<T>& view_dir, int deg,
                             const Vec3<T>& d_color, std::span<Vec3<T>> d_coeffs, Vec3<T>& d_dir) {
    const auto b = sh::basis(view_dir, deg);
    const auto jb = sh::basis_jacobian(view_dir, deg);
    const int n = (deg + 1) * (deg + 1);
    Vec3<T> pre = Vec3<T>::Constant(T(0.5));
    for (int i = 0; i < n; ++i) pre += b[i] * coeffs[i];
    Vec3<T> g = d_color;
    for (int ch = 0; ch < 3; ++ch)
        if (pre[ch] < T(0)) g[ch] = T(0);
    d_dir = Vec3<T>::Zero();
    for (int i = 0; i < n; ++i) {
        d_coeffs[i] += b[i] * g;
        d_dir += jb[i] * g.dot(coeffs[i]);
    }
}

// ---------------------------------------------------------------------------
// Covariance and 3D evaluation.
// ---------------------------------------------------------------------------

template <typename T>
inline Mat3<T> covariance3d(const Splat<T>& s) {
    const Mat3<T> r = rotation_from_quat(s.rotation);
    const Mat3<T> m = r * s.scales().asDiagonal();
    return m * m.transpose();
}

/// Eq.-1 style Gaussian falloff at a world point, truncated at the Mahalanobis
/// radius. Throws on a covariance whose condition number exceeds 1e12.
template <typename T>
inline T gaussian_weight(const Splat<T>& s, const Vec3<T>& x, const RenderOptions& opts = {}) {
    const Vec3<T> sc = s.scales();
    const T smax = sc.maxCoeff(), smin = sc.minCoeff();
    const T cond = (smax / smin) * (smax / smin);
    if (!(cond <= T(1e12))) throw std::domain_error("degenerate covariance");
    // Mahalanobis distance via the factorization: y = R^T (x - mu), m^2 = sum (y_i / s_i)^2.
    const Mat3<T> r = rotation_from_quat(s.rotation);
    const Vec3<T> y = r.transpose() * (x - s.mu);
    const T m2 = (y.array() / sc.array()).square().sum();
    const T rad = T(opts.truncation_radius);
    if (m2 > rad * rad) return T(0);
    return std::exp(T(-0.5) * m2);
}

// ---------------------------------------------------------------------------
// Projection to a 2D Gaussian (EWA-style Jacobian linearization).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline Mat23<T> perspective_jacobian(const Vec3<T>& t, T fx, T fy) {
    const T iz = T(1) / t[2];
    Mat23<T> j;
    j << fx * iz, T(0), -fx * t[0] * iz * iz,
         T(0), fy * iz, -fy * t[1] * iz * iz;
    return j;
}

}  // namespace detail

/// Project one splat into a view. Returns nullopt (Culled) when the center is
/// behind the near plane or the truncation-radius ellipse misses the image.
template <typename T>
inline std::optional<Splat2D<T>> project_splat(const Splat<T>& s, const Camera<T>& cam,
                                               const RenderOptions& opts = {}) {
    const Mat3<T> w = cam.rotation();
    const Vec3<T> t = w * s.mu + cam.t_wc;
    if (!(t[2] > T(opts.near_plane))) return std::nullopt;

    Splat2D<T> out;
    out.source_id = s.id;
    out.mu_world = s.mu;
    out.depth_key = t[2];
    out.mean2d = {cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy};

    const Mat23<T> v = detail::perspective_jacobian(t, cam.fx, cam.fy) * w;
    Mat2<T> c2 = v * covariance3d(s) * v.transpose();
    c2(0, 0) += T(opts.cov2d_regularization);
    c2(1, 1) += T(opts.cov2d_regularization);
    out.cov2d = c2;
    const T det = c2(0, 0) * c2(1, 1) - c2(0, 1) * c2(1, 0);
    out.inv_cov2d << c2(1, 1) / det, -c2(0, 1) / det, -c2(1, 0) / det, c2(0, 0) / det;

    const T rad = T(opts.truncation_radius);
    const T rx = rad * std::sqrt(c2(0, 0)), ry = rad * std::sqrt(c2(1, 1));
    if (out.mean2d[0] + rx < T(0) || out.mean2d[0] - rx > T(cam.width) ||
        out.mean2d[1] + ry < T(0) || out.mean2d[1] - ry > T(cam.height))
        return std::nullopt;

    const int deg = opts.sh_degree < 0 ? s.sh_degree() : std::min(opts.sh_degree, s.sh_degree());
    const Vec3<T> dir = (s.mu - cam.center()).normalized();
    out.color = eval_sh<T>(s.sh, dir, deg);
    out.alpha = s.alpha();
    out.world_radius = rad * s.max_scale();
    return out;
}

/// Unnormalized 2D Gaussian density at a pixel-space point (peak 1 at the
/// mean), truncated at the Mahalanobis radius.
template <typename T>
inline T eval_2d(const Splat2D<T>& s, const Vec2<T>& pixel, const RenderOptions& opts = {}) {
    const Vec2<T> delta = pixel - s.mean2d;
    const T m2 = delta.dot(s.inv_cov2d * delta);
    const T rad = T(opts.truncation_radius);
    if (m2 > rad * rad) return T(0);
    return std::exp(T(-0.5) * m2);
}

// ---------------------------------------------------------------------------
// Backward helpers. Pixel-space gradients accumulated per projected splat are
// pulled back to splat parameters in one pass per splat.
// ---------------------------------------------------------------------------

/// Pixel-space adjoints for one projected splat, summed over all pixels that
/// touched it.
template <typename T>
struct Splat2DGrad {
    Vec2<T> d_mean2d = Vec2<T>::Zero();
    Mat2<T> d_cov2d = Mat2<T>::Zero();  // symmetric accumulator
    Vec3<T> d_color = Vec3<T>::Zero();
    T d_alpha = T(0);
};

/// Parameter-space gradient slots for one splat.
template <typename T>
struct SplatGradRef {
    Vec3<T>& d_mu;
    Vec3<T>& d_log_scale;
    Vec4<T>& d_rotation;
    T& d_opacity_logit;
    std::span<Vec3<T>> d_sh;
};

/// Pull pixel-space adjoints back to splat parameters. Mirrors project_splat:
/// mean2d, cov2d (through the perspective Jacobian, world rotation and the
/// R S S^T R^T factorization), SH color (including the view-direction chain)
/// and the opacity sigmoid.
template <typename T>
inline void project_splat_backward(const Splat<T>& s, const Camera<T>& cam,
                                   const Splat2DGrad<T>& g, SplatGradRef<T> out,
                                   const RenderOptions& opts = {}) {
    const Mat3<T> w = cam.rotation();
    const Vec3<T> t = w * s.mu + cam.t_wc;
    const T iz = T(1) / t[2];

    // mean2d chain: d mean2d / d t is exactly the perspective Jacobian.
    const Mat23<T> j = detail::perspective_jacobian(t, cam.fx, cam.fy);
    Vec3<T> d_t = j.transpose() * g.d_mean2d;

    // cov2d chain: c2 = V Sigma V^T with V = J W.
    const Mat3<T> r = rotation_from_quat(s.rotation);
    const Vec3<T> sc = s.scales();
    const Mat3<T> m = r * sc.asDiagonal();
    const Mat3<T> sigma = m * m.transpose();
    const Mat23<T> v = j * w;

    Mat2<T> g2 = T(0.5) * (g.d_cov2d + g.d_cov2d.transpose());
    const Mat3<T> d_sigma = v.transpose() * g2 * v;
    const Mat23<T> d_v = (g2 + g2.transpose()) * v * sigma;
    const Mat23<T> d_j = d_v * w.transpose();

    // J's dependence on the camera-space mean.
    d_t[0] += d_j(0, 2) * (-cam.fx * iz * iz);
    d_t[1] += d_j(1, 2) * (-cam.fy * iz * iz);
    d_t[2] += d_j(0, 0) * (-cam.fx * iz * iz) + d_j(0, 2) * (T(2) * cam.fx * t[0] * iz * iz * iz) +
              d_j(1, 1) * (-cam.fy * iz * iz) + d_j(1, 2) * (T(2) * cam.fy * t[1] * iz * iz * iz);

    out.d_mu += w.transpose() * d_t;

    // Sigma = M M^T: d_M = (G + G^T) M = 2 sym(d_sigma) M.
    const Mat3<T> d_m = (d_sigma + d_sigma.transpose()) * m;
    // M = R S: scales (through exp) and rotation.
    const Mat3<T> d_r = d_m * sc.asDiagonal();
    for (int a = 0; a < 3; ++a) out.d_log_scale[a] += (r.col(a).dot(d_m.col(a))) * sc[a];

    // Rotation matrix w.r.t. the normalized quaternion, then through the
    // normalization to the raw one.
    const T n = s.rotation.norm();
    const Vec4<T> qn = s.rotation / n;
    const T qw = qn[0], qx = qn[1], qy = qn[2], qz = qn[3];
    Vec4<T> d_qn = Vec4<T>::Zero();
    auto add = [&](int row, int col, T dw, T dx, T dy, T dz) {
        const T gg = d_r(row, col);
        d_qn[0] += gg * dw;
        d_qn[1] += gg * dx;
        d_qn[2] += gg * dy;
        d_qn[3] += gg * dz;
    };
    add(0, 0, T(0), T(0), T(-4) * qy, T(-4) * qz);
    add(0, 1, T(-2) * qz, T(2) * qy, T(2) * qx, T(-2) * qw);
    add(0, 2, T(2) * qy, T(2) * qz, T(2) * qw, T(2) * qx);
    add(1, 0, T(2) * qz, T(2) * qy, T(2) * qx, T(2) * qw);
    add(1, 1, T(0), T(-4) * qx, T(0), T(-4) * qz);
    add(1, 2, T(-2) * qx, T(-2) * qw, T(2) * qz, T(2) * qy);
    add(2, 0, T(-2) * qy, T(2) * qz, T(-2) * qw, T(2) * qx);
    add(2, 1, T(2) * qx, T(2) * qw, T(2) * qz, T(2) * qy);
    add(2, 2, T(0), T(-4) * qx, T(-4) * qy, T(0));
    out.d_rotation += (d_qn - qn * qn.dot(d_qn)) / n;

    // SH color chain, including d dir / d mu.
    const int deg = opts.sh_degree < 0 ? s.sh_degree() : std::min(opts.sh_degree, s.sh_degree());
    const Vec3<T> rel = s.mu - cam.center();
    const T dist = rel.norm();
    const Vec3<T> dir = rel / dist;
    Vec3<T> d_dir = Vec3<T>::Zero();
    eval_sh_backward<T>(s.sh, dir, deg, g.d_color, out.d_sh, d_dir);
    out.d_mu += (d_dir - dir * dir.dot(d_dir)) / dist;

    // alpha = sigmoid(opacity_logit).
    const T a = s.alpha();
    out.d_opacity_logit += g.d_alpha * a * (T(1) - a);
}

}  // namespace dgs
