#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace dgs {

template <typename T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using Mat23 = Eigen::Matrix<T, 2, 3>;

using SplatId = std::uint64_t;

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
inline T logit(T p) {
    return std::log(p / (T(1) - p));
}

/// Rotation matrix from a (w,x,y,z) quaternion. The quaternion is normalized
/// here, so callers may hand in raw optimizer state.
template <typename T>
inline Mat3<T> rotation_from_quat(const Vec4<T>& q_wxyz) {
    const T n = q_wxyz.norm();
    if (n <= T(0)) {
        throw std::domain_error("zero quaternion");
    }
    const T w = q_wxyz[0] / n, x = q_wxyz[1] / n, y = q_wxyz[2] / n, z = q_wxyz[3] / n;
    Mat3<T> r;
    r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
         T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
         T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
    return r;
}

// Eigenvalues of a symmetric 2x2 matrix, ascending.
template <typename T>
inline Vec2<T> sym2x2_eigenvalues(const Mat2<T>& m) {
    const T mid = (m(0, 0) + m(1, 1)) / T(2);
    const T det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    const T d = std::sqrt(std::max(T(0), mid * mid - det));
    return {mid - d, mid + d};
}

}  // namespace dgs
