#pragma once

#include "dgs/image.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dgs {

namespace detail {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

template <typename T>
std::array<T, kSsimWindow> ssim_kernel() {
    std::array<T, kSsimWindow> k{};
    T sum = T(0);
    for (int i = 0; i < kSsimWindow; ++i) {
        const double x = i - kSsimWindow / 2;
        k[i] = T(std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma)));
        sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable Gaussian blur with zero padding (conv2d semantics).
template <typename T>
Image<T> gauss_blur(const Image<T>& img) {
    static const auto kernel = ssim_kernel<T>();
    const int r = kSsimWindow / 2;
    Image<T> tmp(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                T acc = T(0);
                for (int i = -r; i <= r; ++i) {
                    const int xx = x + i;
                    if (xx < 0 || xx >= img.width) continue;
                    acc += kernel[i + r] * img.at(y, xx, c);
                }
                tmp.at(y, x, c) = acc;
            }
    Image<T> out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                T acc = T(0);
                for (int i = -r; i <= r; ++i) {
                    const int yy = y + i;
                    if (yy < 0 || yy >= img.height) continue;
                    acc += kernel[i + r] * tmp.at(yy, x, c);
                }
                out.at(y, x, c) = acc;
            }
    return out;
}

template <typename T>
Image<T> hadamard(const Image<T>& a, const Image<T>& b) {
    Image<T> out(a.width, a.height, a.channels);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

}  // namespace detail

template <typename T>
T mse(const Image<T>& a, const Image<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: resolution mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const T d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / T(a.data.size());
}

/// PSNR in dB for [0,1] images; +inf for identical inputs.
template <typename T>
double psnr(const Image<T>& a, const Image<T>& b) {
    const T m = mse(a, b);
    if (m == T(0)) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / double(m));
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, C1=1e-4, C2=9e-4) over all
/// pixels and channels, and optionally its gradient w.r.t. the first image.
template <typename T>
T ssim(const Image<T>& x, const Image<T>& y, Image<T>* grad_x = nullptr) {
    if (!x.same_shape(y)) throw std::invalid_argument("ssim: resolution mismatch");
    using detail::gauss_blur;
    using detail::hadamard;
    const T c1 = T(detail::kSsimC1), c2 = T(detail::kSsimC2);

    const Image<T> mu_x = gauss_blur(x), mu_y = gauss_blur(y);
    const Image<T> xx = gauss_blur(hadamard(x, x)), yy = gauss_blur(hadamard(y, y));
    const Image<T> xy = gauss_blur(hadamard(x, y));

    const std::size_t n = x.data.size();
    Image<T> a_map, b_map, c_map;
    if (grad_x) {
        a_map = Image<T>(x.width, x.height, x.channels);
        b_map = a_map;
        c_map = a_map;
    }
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T mx = mu_x.data[i], my = mu_y.data[i];
        const T sxx = xx.data[i] - mx * mx;
        const T syy = yy.data[i] - my * my;
        const T sxy = xy.data[i] - mx * my;
        const T n1 = 2 * mx * my + c1, n2 = 2 * sxy + c2;
        const T d1 = mx * mx + my * my + c1, d2 = sxx + syy + c2;
        const T s = (n1 * n2) / (d1 * d2);
        total += s;
        if (grad_x) {
            a_map.data[i] = 2 * my * n2 / (d1 * d2) - 2 * mx * s / d1;  // dS/dmu_x
            b_map.data[i] = -s / d2;                                    // dS/dsigma_xx
            c_map.data[i] = 2 * n1 / (d1 * d2);                         // dS/dsigma_xy
        }
    }
    const T mean = total / T(n);
    if (grad_x) {
        // dS/dx_q = conv(A) + 2 x conv(B) - 2 conv(B mu_x) + y conv(C) - conv(C mu_y),
        // all through the same symmetric window, then / n for the mean.
        const Image<T> ca = gauss_blur(a_map);
        const Image<T> cb = gauss_blur(b_map);
        const Image<T> cbmx = gauss_blur(hadamard(b_map, mu_x));
        const Image<T> cc = gauss_blur(c_map);
        const Image<T> ccmy = gauss_blur(hadamard(c_map, mu_y));
        *grad_x = Image<T>(x.width, x.height, x.channels);
        for (std::size_t i = 0; i < n; ++i)
            grad_x->data[i] = (ca.data[i] + 2 * x.data[i] * cb.data[i] - 2 * cbmx.data[i] +
                               y.data[i] * cc.data[i] - ccmy.data[i]) / T(n);
    }
    return mean;
}

template <typename T>
struct LossResult {
    T value = T(0);
    Image<T> grad;  // dLoss/d render
};

/// (1-lambda) L1 + lambda (1 - SSIM) with the analytic gradient w.r.t. the
/// rendered image.
template <typename T>
LossResult<T> loss(const Image<T>& render, const Image<T>& target, double lambda_ssim = 0.2) {
    if (!render.same_shape(target)) throw std::invalid_argument("loss: resolution mismatch");
    LossResult<T> out;
    out.grad = Image<T>(render.width, render.height, render.channels);
    const std::size_t n = render.data.size();
    const T lam = T(lambda_ssim);

    T l1 = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = render.data[i] - target.data[i];
        l1 += std::abs(d);
        out.grad.data[i] = (T(1) - lam) * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))) / T(n);
    }
    l1 /= T(n);

    T ssim_val = T(0);
    if (lambda_ssim > 0.0) {
        Image<T> ssim_grad;
        ssim_val = ssim(render, target, &ssim_grad);
        for (std::size_t i = 0; i < n; ++i) out.grad.data[i] -= lam * ssim_grad.data[i];
    }
    out.value = (T(1) - lam) * l1 + lam * (T(1) - ssim_val);
    return out;
}

}  // namespace dgs
